//! Command-line interface: corpus synthesis, training, evaluation,
//! hierarchy export, and reference baselines.
//!
//! Exit codes: 0 on success, 2 on input errors (files, schemas,
//! configuration), 3 on numerical failures.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ncrpvae::error::ErrorKind;
use ncrpvae::eval::ExportFormat;
use ncrpvae::{baselines, eval, generative, trainer};

#[derive(Parser)]
#[command(name = "ncrpvae", version, about = "Autoencoder with a learned tree prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus with known cluster structure.
    Synth(SynthArgs),
    /// Train a model on a corpus and write a checkpoint plus metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus, printing a JSON report.
    Eval(EvalArgs),
    /// Export the learned hierarchy as JSON or DOT.
    Export(ExportArgs),
    /// Run a reference baseline on a train/test split.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Children per tree level, comma separated (e.g. 3,2).
    #[arg(long, value_delimiter = ',', default_value = "3,2")]
    branching: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    elems_per_seq: usize,
    #[arg(long, default_value_t = 200)]
    n_seqs: usize,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    /// Dimension of the generating latent space (defaults to leaf count).
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Optional path for the generating tree as JSON.
    #[arg(long)]
    tree_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus CSV.
    #[arg(long)]
    corpus: PathBuf,
    /// TOML training configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma_d: Option<f64>,
    #[arg(long)]
    sigma_n: Option<f64>,
    #[arg(long)]
    gamma_star: Option<f64>,
    /// Disable tree growth and pruning.
    #[arg(long)]
    no_adapt: bool,
    /// Resume from an existing checkpoint instead of initializing.
    #[arg(long)]
    resume_from: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics trace CSV output path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Structural-edit log (JSON lines) output path.
    #[arg(long)]
    adapt_log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Corpus to score.
    #[arg(long)]
    corpus: PathBuf,
    /// Labelled corpus for majority-vote node labels (defaults to the
    /// scored corpus).
    #[arg(long)]
    label_corpus: Option<PathBuf>,
    /// Monte Carlo samples per element for the log-likelihood.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    /// Corpus supplying representative elements.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Representatives per node (0 = structure only).
    #[arg(long, default_value_t = 0)]
    representatives: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Dot,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Cluster / mixture-component count.
    #[arg(long, default_value_t = 6)]
    k: usize,
    /// TOML training configuration for the VAE baselines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo samples per element for the log-likelihood.
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Kmeans,
    VaeGmm,
    VaeStd,
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err.kind() {
                ErrorKind::Input => ExitCode::from(2),
                ErrorKind::Numerical => ExitCode::from(3),
            }
        }
    }
}

fn write_or_stdout(text: &str, out: Option<&PathBuf>) -> ncrpvae::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run() -> ncrpvae::Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => {
            let cfg = generative::SynthConfig {
                branching: args.branching,
                elems_per_seq: args.elems_per_seq,
                n_seqs: args.n_seqs,
                feature_dim: args.feature_dim,
                latent_dim: args.latent_dim,
                separation: args.separation,
                noise: args.noise,
                seed: args.seed,
                ..Default::default()
            };
            let (corpus, truth) = generative::synth_corpus(&cfg)?;
            let file = File::create(&args.out)?;
            corpus.write_csv(BufWriter::new(file))?;
            if let Some(tree_path) = args.tree_out {
                let doc = truth.tree.to_json_doc(&Default::default());
                std::fs::write(tree_path, serde_json::to_string_pretty(&doc).expect("tree doc"))?;
            }
            eprintln!(
                "wrote {} sequences x {} elements ({} leaves) to {}",
                cfg.n_seqs,
                cfg.elems_per_seq,
                truth.tree.n_leaves(),
                args.out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let mut cfg = match &args.config {
                Some(path) => trainer::TrainConfig::from_toml_file(path)?,
                None => trainer::TrainConfig::default(),
            };
            if let Some(v) = args.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = args.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = args.latent_dim {
                cfg.latent_dim = v;
            }
            if let Some(v) = args.seed {
                cfg.seed = v;
            }
            if let Some(v) = args.sigma_d {
                cfg.sigma_d = v;
            }
            if let Some(v) = args.sigma_n {
                cfg.sigma_n = v;
            }
            if let Some(v) = args.gamma_star {
                cfg.gamma_star = v;
            }
            if args.no_adapt {
                cfg.adapt.enabled = false;
            }
            let corpus = eval::ingest(&args.corpus)?;
            let outcome = match args.resume_from {
                Some(path) => {
                    let state = trainer::load_checkpoint(&path)?;
                    trainer::resume(&cfg, &corpus, state)?
                }
                None => trainer::train(&cfg, &corpus)?,
            };
            trainer::save_checkpoint(&outcome.state, &args.out)?;
            if let Some(path) = args.trace {
                let file = File::create(path)?;
                trainer::write_trace_csv(&outcome.trace, BufWriter::new(file))?;
            }
            if let Some(path) = args.adapt_log {
                let file = File::create(path)?;
                trainer::write_adapt_jsonl(&outcome.adapt_log, BufWriter::new(file))?;
            }
            if let Some(last) = outcome.trace.last() {
                eprintln!(
                    "round {}: elbo {:.4e}, loss {:.4e}, {} paths",
                    last.round, last.elbo, last.nn_loss, last.n_paths
                );
            }
            Ok(())
        }
        Command::Eval(args) => {
            let state = trainer::load_checkpoint(&args.model)?;
            let corpus = eval::ingest(&args.corpus)?;
            let label_corpus = match &args.label_corpus {
                Some(path) => eval::ingest(path)?,
                None => corpus.clone(),
            };
            let report = eval::evaluate(
                &state.tree,
                &state.autoencoder,
                &label_corpus,
                &corpus,
                args.samples,
                args.seed,
            )?;
            let text = serde_json::to_string_pretty(&report).expect("report");
            write_or_stdout(&text, args.out.as_ref())
        }
        Command::Export(args) => {
            let state = trainer::load_checkpoint(&args.model)?;
            let corpus = match &args.corpus {
                Some(path) => Some(eval::ingest(path)?),
                None => None,
            };
            let format = match args.format {
                FormatArg::Json => ExportFormat::Json,
                FormatArg::Dot => ExportFormat::Dot,
            };
            let text = eval::export_tree(
                &state.tree,
                &state.autoencoder,
                corpus.as_ref(),
                format,
                args.representatives,
            )?;
            write_or_stdout(&text, args.out.as_ref())
        }
        Command::Baseline(args) => {
            let train_corpus = eval::ingest(&args.train)?;
            let test_corpus = eval::ingest(&args.test)?;
            let mut cfg = match &args.config {
                Some(path) => trainer::TrainConfig::from_toml_file(path)?,
                None => trainer::TrainConfig::default(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let report = match args.method {
                MethodArg::Kmeans => {
                    let acc =
                        baselines::kmeans_classify(&train_corpus, &test_corpus, args.k, cfg.seed)?;
                    serde_json::json!({ "method": "kmeans", "k": args.k, "aggregate_accuracy": acc })
                }
                MethodArg::VaeGmm => {
                    let model = baselines::train_vae_gmm(&cfg, &train_corpus, args.k)?;
                    let acc = baselines::gmm_classify(&model, &train_corpus, &test_corpus)?;
                    let (sum, mean) =
                        eval::test_loglik(&model.params, &test_corpus, args.samples, cfg.seed)?;
                    serde_json::json!({
                        "method": "vae-gmm", "k": args.k, "aggregate_accuracy": acc,
                        "loglik_sum": sum, "loglik_mean": mean,
                    })
                }
                MethodArg::VaeStd => {
                    let params = baselines::train_std_normal(&cfg, &train_corpus)?;
                    let (sum, mean) =
                        eval::test_loglik(&params, &test_corpus, args.samples, cfg.seed)?;
                    serde_json::json!({
                        "method": "vae-std", "loglik_sum": sum, "loglik_mean": mean,
                    })
                }
            };
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report).expect("report"))?;
            Ok(())
        }
    }
}
