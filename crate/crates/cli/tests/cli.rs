//! Drives the compiled binary through the full workflow and checks the
//! documented exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ncrpvae"))
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_workflow_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    run_ok(&[
        "synth",
        "--branching", "3",
        "--n-seqs", "24",
        "--elems-per-seq", "5",
        "--feature-dim", "12",
        "--latent-dim", "3",
        "--separation", "8",
        "--noise", "1",
        "--seed", "3",
        "--out", &p("corpus.csv"),
        "--tree-out", &p("truth.json"),
    ]);
    assert!(Path::new(&p("corpus.csv")).exists());
    assert!(Path::new(&p("truth.json")).exists());

    std::fs::write(dir.path().join("train.toml"), "epochs = 4\nlatent_dim = 4\nseed = 1\n")
        .unwrap();
    run_ok(&[
        "train",
        "--corpus", &p("corpus.csv"),
        "--config", &p("train.toml"),
        "--epochs", "3",
        "--out", &p("model.json"),
        "--trace", &p("trace.csv"),
        "--adapt-log", &p("adapt.jsonl"),
    ]);
    let trace = std::fs::read_to_string(p("trace.csv")).unwrap();
    assert!(trace.starts_with("round,elbo,nn_loss,recon,kl,n_paths,n_nodes"));
    assert_eq!(trace.lines().count(), 4, "header plus the three override epochs");

    let out = bin()
        .args(["eval", "--model", &p("model.json"), "--corpus", &p("corpus.csv"), "--samples", "8"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["aggregate_accuracy"].is_number());
    assert!(report["loglik_mean"].is_number());

    run_ok(&[
        "export",
        "--model", &p("model.json"),
        "--format", "dot",
        "--corpus", &p("corpus.csv"),
        "--representatives", "2",
        "--out", &p("tree.dot"),
    ]);
    let dot = std::fs::read_to_string(p("tree.dot")).unwrap();
    assert!(dot.starts_with("digraph"));

    let out = bin()
        .args([
            "baseline",
            "--method", "kmeans",
            "--train", &p("corpus.csv"),
            "--test", &p("corpus.csv"),
            "--k", "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["method"], "kmeans");

    // resume continues to the configured horizon
    run_ok(&[
        "train",
        "--corpus", &p("corpus.csv"),
        "--config", &p("train.toml"),
        "--epochs", "5",
        "--resume-from", &p("model.json"),
        "--out", &p("model5.json"),
        "--trace", &p("trace5.csv"),
    ]);
    let trace5 = std::fs::read_to_string(p("trace5.csv")).unwrap();
    assert_eq!(trace5.lines().count(), 3, "rounds 3 and 4 after resuming at 3");

    // input errors exit with 2
    let out = bin()
        .args(["eval", "--model", &p("missing.json"), "--corpus", &p("corpus.csv")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "missing checkpoint is an input error");

    std::fs::write(dir.path().join("bad.csv"), "sequence_id,element_index,label,f_0\n0,0,,oops\n")
        .unwrap();
    let out = bin()
        .args(["train", "--corpus", &p("bad.csv"), "--out", &p("x.json")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "schema violation is an input error");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("row 1"), "error names the row: {stderr}");

    // numerical failures exit with 3
    std::fs::write(
        dir.path().join("diverge.toml"),
        "epochs = 2\nlatent_dim = 3\n[optimizer]\nlearning_rate = 1e155\n",
    )
    .unwrap();
    let out = bin()
        .args([
            "train",
            "--corpus", &p("corpus.csv"),
            "--config", &p("diverge.toml"),
            "--out", &p("y.json"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "divergence is a numerical failure");
}
