//! Alternating joint optimization: each round runs one epoch of
//! minibatch autoencoder updates with the tree frozen, refreshes the
//! latent codes from the encoder, runs coordinate-ascent sweeps with the
//! autoencoder frozen, and finally adapts the tree structure.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{grow, prune, AdaptConfig, AdaptEvent};
use crate::error::{Error, Result};
use crate::generative::{mix_seed, Corpus};
use crate::neural::{
    backward, loss_with_eps, sample_eps, AutoencoderParams, Gradients, PriorView, RmspropConfig,
    RmspropState,
};
use crate::tree::{TreeNode, TruncatedTree};
use crate::variational::{compute_elbo, vi_sweep, LatentTable, SequenceVarState};

const SEED_TREE_INIT: u64 = 0x7EE;
const SEED_NN_INIT: u64 = 0x22;
const SEED_EPOCH: u64 = 0xE000_0000;
const SEED_ADAPT: u64 = 0xAD00_0000;

/// Everything the training loop needs; loadable from TOML, overridable
/// by CLI flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Coordinate-ascent sweeps after each epoch of network training.
    pub vi_sweeps_per_round: usize,
    pub latent_dim: usize,
    pub gamma_star: f64,
    pub sigma_n: f64,
    pub sigma_d: f64,
    /// Scalar filled into the root prior mean vector.
    pub alpha_star: f64,
    /// Leaf count of the initial tree (root plus this many leaves).
    pub init_leaves: usize,
    pub seed: u64,
    pub optimizer: RmspropConfig,
    /// Tree adaptation thresholds and switch.
    pub adapt: AdaptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            vi_sweeps_per_round: 1,
            latent_dim: 8,
            gamma_star: 3.0,
            sigma_n: 4.0,
            sigma_d: 3.0,
            alpha_star: 0.0,
            init_leaves: 2,
            seed: 0,
            optimizer: RmspropConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.init_leaves == 0 {
            return Err(Error::Config("init_leaves must be positive".into()));
        }
        if !(self.gamma_star > 0.0 && self.sigma_n > 0.0 && self.sigma_d > 0.0) {
            return Err(Error::Config("gamma_star, sigma_n, sigma_d must be positive".into()));
        }
        if self.sigma_d > self.sigma_n {
            log::warn!(
                "sigma_d {} exceeds sigma_n {}; emission noise above the node prior spread destabilizes assignments",
                self.sigma_d,
                self.sigma_n
            );
        }
        self.adapt.validate()?;
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path)?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mutable training state; the checkpoint payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub tree: TruncatedTree,
    pub autoencoder: AutoencoderParams,
    pub opt: RmspropState,
    pub var_states: Vec<SequenceVarState>,
    pub round: usize,
}

impl ModelState {
    /// Checks that variational shapes track the corpus and the tree.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.var_states.len() != corpus.n_sequences() {
            return Err(Error::Config(format!(
                "state holds {} sequences, corpus has {}",
                self.var_states.len(),
                corpus.n_sequences()
            )));
        }
        let n_paths = self.tree.n_leaves();
        for (m, (state, seq)) in self.var_states.iter().zip(corpus.sequences()).enumerate() {
            if state.phi.len() != seq.elements.len() {
                return Err(Error::Config(format!(
                    "sequence {m}: {} assignment rows for {} elements",
                    state.phi.len(),
                    seq.elements.len()
                )));
            }
            if state.phi.iter().any(|row| row.len() != n_paths) {
                return Err(Error::Config(format!(
                    "sequence {m}: assignment width differs from the tree's {n_paths} paths"
                )));
            }
        }
        Ok(())
    }
}

/// One row of the metrics trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub elbo: f64,
    pub nn_loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub n_paths: usize,
    pub n_nodes: usize,
}

/// A structural edit stamped with the round it happened in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub round: usize,
    #[serde(flatten)]
    pub event: AdaptEvent,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub trace: Vec<RoundMetrics>,
    pub adapt_log: Vec<AdaptRecord>,
}

pub fn write_trace_csv<W: Write>(trace: &[RoundMetrics], mut w: W) -> Result<()> {
    writeln!(w, "round,elbo,nn_loss,recon,kl,n_paths,n_nodes")?;
    for row in trace {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            row.round, row.elbo, row.nn_loss, row.recon, row.kl, row.n_paths, row.n_nodes
        )?;
    }
    Ok(())
}

pub fn write_adapt_jsonl<W: Write>(log: &[AdaptRecord], mut w: W) -> Result<()> {
    for record in log {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("adapt record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Fresh state: the configured initial tree (leaf means drawn around
/// α*), Glorot autoencoder, prior sticks and uniform assignments.
pub fn init_state(cfg: &TrainConfig, corpus: &Corpus) -> Result<ModelState> {
    cfg.validate()?;
    let alpha_star = Array1::from_elem(cfg.latent_dim, cfg.alpha_star);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SEED_TREE_INIT));
    let children = (0..cfg.init_leaves)
        .map(|_| {
            let mu = alpha_star.mapv(|a| {
                a + cfg.sigma_n * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
            });
            TreeNode::leaf(mu, cfg.sigma_n)
        })
        .collect();
    let root = TreeNode { mu: alpha_star.clone(), sigma: cfg.sigma_n, children };
    let tree = TruncatedTree::new(root, alpha_star, cfg.gamma_star, cfg.sigma_n, cfg.sigma_d)?;

    let autoencoder =
        AutoencoderParams::init(corpus.dim(), cfg.latent_dim, mix_seed(cfg.seed, SEED_NN_INIT));
    let opt = RmspropState::new(&autoencoder, cfg.optimizer);
    let var_states = corpus
        .sequences()
        .iter()
        .map(|s| SequenceVarState::prior(&tree, s.elements.len()))
        .collect();
    Ok(ModelState { tree, autoencoder, opt, var_states, round: 0 })
}

/// The latent prior the network phase sees for each element.
pub enum EpochPrior<'a> {
    /// Leaf means of a frozen tree weighted by the element's current
    /// assignment vector.
    Tree { tree: &'a TruncatedTree, states: &'a [SequenceVarState] },
    /// The same fixed mixture for every element.
    Fixed { means: &'a [Array1<f64>], weights: &'a [f64], sigma: f64 },
}

/// One full pass of minibatch updates. Returns the epoch means of
/// (total loss, reconstruction, kl). The order of elements and the ε
/// draws come from `rng`, so the pass is deterministic given its seed.
pub fn nn_epoch(
    params: &mut AutoencoderParams,
    opt: &mut RmspropState,
    corpus: &Corpus,
    prior: EpochPrior<'_>,
    batch_size: usize,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let leaf_means: Vec<Array1<f64>> = match &prior {
        EpochPrior::Tree { tree, .. } => tree
            .leaves()
            .iter()
            .map(|p| tree.node(p).expect("leaf exists").mu.clone())
            .collect(),
        EpochPrior::Fixed { means, .. } => means.to_vec(),
    };

    let mut order: Vec<(usize, usize)> = corpus.iter_elements().map(|(m, n, _)| (m, n)).collect();
    order.shuffle(rng);

    let mut sums = (0.0, 0.0, 0.0);
    let total = order.len();
    for (batch_idx, batch) in order.chunks(batch_size).enumerate() {
        let mut grads = Gradients::zeros_like(params);
        for &(m, n) in batch {
            let x = corpus.element(m, n);
            let eps = sample_eps(params.latent_dim, rng);
            let view = match &prior {
                EpochPrior::Tree { tree, states } => PriorView {
                    means: &leaf_means,
                    weights: &states[m].phi[n],
                    sigma: tree.sigma_d,
                },
                EpochPrior::Fixed { means: _, weights, sigma } => {
                    PriorView { means: &leaf_means, weights, sigma: *sigma }
                }
            };
            let (parts, cache) = loss_with_eps(params, x, view, &eps)?;
            if !parts.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at round {round}, batch {batch_idx}, element ({m},{n}); \
                     |enc_mean| {:.3e}, |enc_logstd| {:.3e}, |dec| {:.3e}",
                    params.enc_mean.w.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    params.enc_logstd.w.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    params.dec.w.iter().map(|v| v * v).sum::<f64>().sqrt(),
                )));
            }
            sums.0 += parts.total;
            sums.1 += parts.reconstruction;
            sums.2 += parts.kl;
            grads.add_assign(&backward(params, &cache));
        }
        grads.scale(1.0 / batch.len() as f64);
        opt.step(params, &grads);
    }
    Ok((sums.0 / total as f64, sums.1 / total as f64, sums.2 / total as f64))
}

/// Encodes the whole corpus; the VI observation `z` is the posterior
/// mean, which keeps sweeps deterministic.
pub fn refresh_latents(params: &AutoencoderParams, corpus: &Corpus) -> Result<LatentTable> {
    let mut z_mean = Vec::with_capacity(corpus.n_sequences());
    let mut z_stdev = Vec::with_capacity(corpus.n_sequences());
    for seq in corpus.sequences() {
        let mut means = Vec::with_capacity(seq.elements.len());
        let mut stds = Vec::with_capacity(seq.elements.len());
        for x in &seq.elements {
            let (m, s) = params.encode(x)?;
            means.push(m);
            stds.push(s);
        }
        z_mean.push(means);
        z_stdev.push(stds);
    }
    Ok(LatentTable { z: z_mean.clone(), z_mean, z_stdev })
}

/// Continues training from `state.round` up to `cfg.epochs`.
pub fn resume(cfg: &TrainConfig, corpus: &Corpus, mut state: ModelState) -> Result<TrainOutcome> {
    cfg.validate()?;
    state.validate(corpus)?;
    let mut trace = Vec::new();
    let mut adapt_log = Vec::new();

    for round in state.round..cfg.epochs {
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SEED_EPOCH + round as u64));
        let (nn_loss, recon, kl) = nn_epoch(
            &mut state.autoencoder,
            &mut state.opt,
            corpus,
            EpochPrior::Tree { tree: &state.tree, states: &state.var_states },
            cfg.batch_size,
            round,
            &mut epoch_rng,
        )?;

        let latents = refresh_latents(&state.autoencoder, corpus)?;
        for _ in 0..cfg.vi_sweeps_per_round {
            vi_sweep(&mut state.tree, &mut state.var_states, &latents)?;
        }
        let elbo = compute_elbo(&state.tree, &state.var_states, &latents)?;

        if cfg.adapt.enabled {
            let mut adapt_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SEED_ADAPT + round as u64));
            let grown =
                grow(&mut state.tree, &mut state.var_states, &latents, &cfg.adapt, &mut adapt_rng)?;
            let pruned = prune(&mut state.tree, &mut state.var_states, &cfg.adapt)?;
            for event in grown.into_iter().chain(pruned) {
                adapt_log.push(AdaptRecord { round, event });
            }
        }

        trace.push(RoundMetrics {
            round,
            elbo,
            nn_loss,
            recon,
            kl,
            n_paths: state.tree.n_leaves(),
            n_nodes: state.tree.n_nodes(),
        });
        state.round = round + 1;
    }
    Ok(TrainOutcome { state, trace, adapt_log })
}

/// Trains from scratch.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    let state = init_state(cfg, corpus)?;
    resume(cfg, corpus, state)
}

// --- checkpoints -------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    state: ModelState,
}

/// JSON checkpoint; floating-point fields round-trip bit-exactly.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let doc = Checkpoint { schema_version: CHECKPOINT_VERSION, state: state.clone() };
    let text = serde_json::to_string(&doc)
        .map_err(|e| Error::CorruptCheckpoint(format!("serialize: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path)?;
    // surface version mismatches before full parsing
    let probe: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let found = probe
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptCheckpoint("missing schema_version".into()))?
        as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found, expected: CHECKPOINT_VERSION });
    }
    let doc: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    doc.state.tree.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(doc.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generative::{synth_corpus, SynthConfig};

    fn small_corpus(seed: u64) -> Corpus {
        let cfg = SynthConfig {
            branching: vec![2],
            elems_per_seq: 4,
            n_seqs: 6,
            feature_dim: 5,
            latent_dim: Some(2),
            separation: 4.0,
            noise: 0.5,
            seed,
            ..Default::default()
        };
        synth_corpus(&cfg).unwrap().0
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            latent_dim: 3,
            sigma_n: 2.0,
            sigma_d: 0.8,
            adapt: AdaptConfig { enabled: false, ..Default::default() },
            ..Default::default()
        }
    }

    fn checkpoint_bytes(state: &ModelState) -> String {
        serde_json::to_string(state).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let corpus = small_corpus(1);
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let out = train(&cfg, &corpus).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.state.round, 0);
        assert_eq!(out.state.tree.n_leaves(), cfg.init_leaves);
    }

    #[test]
    fn deterministic_traces_and_checkpoints() {
        let corpus = small_corpus(2);
        let cfg = small_cfg();
        let a = train(&cfg, &corpus).unwrap();
        let b = train(&cfg, &corpus).unwrap();
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_trace_csv(&a.trace, &mut csv_a).unwrap();
        write_trace_csv(&b.trace, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(checkpoint_bytes(&a.state), checkpoint_bytes(&b.state));

        let c = train(&TrainConfig { seed: 9, ..cfg }, &corpus).unwrap();
        assert_ne!(checkpoint_bytes(&a.state), checkpoint_bytes(&c.state));
    }

    #[test]
    fn resume_equals_uninterrupted_run() {
        let corpus = small_corpus(3);
        let cfg = TrainConfig { epochs: 6, ..small_cfg() };
        let full = train(&cfg, &corpus).unwrap();

        let half = train(&TrainConfig { epochs: 3, ..cfg.clone() }, &corpus).unwrap();
        let resumed = resume(&cfg, &corpus, half.state).unwrap();
        assert_eq!(checkpoint_bytes(&full.state), checkpoint_bytes(&resumed.state));
        let tail: Vec<_> = full.trace[3..].to_vec();
        assert_eq!(tail.len(), resumed.trace.len());
        for (a, b) in tail.iter().zip(&resumed.trace) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let corpus = small_corpus(4);
        let out = train(&small_cfg(), &corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&out.state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint_bytes(&out.state), checkpoint_bytes(&loaded));

        // truncated file
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));

        // version mismatch
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["schema_version"] = serde_json::json!(999);
        fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { found: 999, .. })
        ));
    }

    #[test]
    fn vi_phase_freezes_network_and_nn_phase_freezes_tree() {
        let corpus = small_corpus(5);
        let cfg = small_cfg();
        let mut state = init_state(&cfg, &corpus).unwrap();

        // network phase: tree and variational state bit-identical
        let tree_before = serde_json::to_string(&state.tree).unwrap();
        let var_before = serde_json::to_string(&state.var_states).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        nn_epoch(
            &mut state.autoencoder,
            &mut state.opt,
            &corpus,
            EpochPrior::Tree { tree: &state.tree, states: &state.var_states },
            cfg.batch_size,
            0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tree_before, serde_json::to_string(&state.tree).unwrap());
        assert_eq!(var_before, serde_json::to_string(&state.var_states).unwrap());

        // VI phase: network parameters bit-identical
        let nn_before = serde_json::to_string(&state.autoencoder).unwrap();
        let latents = refresh_latents(&state.autoencoder, &corpus).unwrap();
        vi_sweep(&mut state.tree, &mut state.var_states, &latents).unwrap();
        assert_eq!(nn_before, serde_json::to_string(&state.autoencoder).unwrap());
    }

    #[test]
    fn vi_phase_never_decreases_elbo_within_round() {
        let corpus = small_corpus(6);
        let cfg = TrainConfig { epochs: 4, vi_sweeps_per_round: 3, ..small_cfg() };
        let mut state = init_state(&cfg, &corpus).unwrap();
        for round in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SEED_EPOCH + round as u64));
            nn_epoch(
                &mut state.autoencoder,
                &mut state.opt,
                &corpus,
                EpochPrior::Tree { tree: &state.tree, states: &state.var_states },
                cfg.batch_size,
                round,
                &mut rng,
            )
            .unwrap();
            let latents = refresh_latents(&state.autoencoder, &corpus).unwrap();
            let mut last =
                compute_elbo(&state.tree, &state.var_states, &latents).unwrap();
            for _ in 0..cfg.vi_sweeps_per_round {
                vi_sweep(&mut state.tree, &mut state.var_states, &latents).unwrap();
                let elbo = compute_elbo(&state.tree, &state.var_states, &latents).unwrap();
                assert!(elbo >= last - 1e-9, "VI decreased the bound: {last} -> {elbo}");
                last = elbo;
            }
        }
    }

    #[test]
    fn divergent_rate_aborts_with_diagnostics() {
        let corpus = small_corpus(7);
        let mut cfg = small_cfg();
        cfg.optimizer.learning_rate = 1e155;
        match train(&cfg, &corpus) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("round"), "got {msg}"),
            other => panic!("expected a numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn adaptation_keeps_shapes_in_sync() {
        let cfg = SynthConfig {
            branching: vec![4],
            elems_per_seq: 6,
            n_seqs: 20,
            feature_dim: 12,
            latent_dim: Some(4),
            separation: 8.0,
            noise: 0.6,
            seed: 8,
            ..Default::default()
        };
        let (corpus, _) = synth_corpus(&cfg).unwrap();
        let tcfg = TrainConfig {
            epochs: 8,
            latent_dim: 4,
            sigma_n: 4.0,
            sigma_d: 1.0,
            adapt: AdaptConfig {
                enabled: true,
                radius_threshold: 1.5,
                split_arity: 2,
                fraction_threshold: 0.02,
                max_leaves: 12,
            },
            ..Default::default()
        };
        let out = train(&tcfg, &corpus).unwrap();
        out.state.validate(&corpus).unwrap();
        for row in &out.trace {
            assert!(row.n_paths >= 1 && row.n_paths <= 12);
        }
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = small_cfg();
        let text = toml::to_string(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        fs::write(&path, &text).unwrap();
        let loaded = TrainConfig::from_toml_file(&path).unwrap();
        assert_eq!(serde_json::to_string(&cfg).unwrap(), serde_json::to_string(&loaded).unwrap());

        // partial files fall back to defaults
        fs::write(&path, "epochs = 2\nseed = 5\n").unwrap();
        let partial = TrainConfig::from_toml_file(&path).unwrap();
        assert_eq!(partial.epochs, 2);
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.batch_size, TrainConfig::default().batch_size);

        let bad = TrainConfig { batch_size: 0, ..small_cfg() };
        assert!(bad.validate().is_err());
    }
}
