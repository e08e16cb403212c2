//! End-to-end export checks: the DOT document parses under a real DOT
//! grammar, and the JSON document round-trips through the tree loader.

use ncrpvae::eval::{export_tree, ExportFormat};
use ncrpvae::generative::{synth_corpus, SynthConfig};
use ncrpvae::trainer::{train, TrainConfig};
use ncrpvae::tree::TruncatedTree;

fn trained() -> (ncrpvae::trainer::ModelState, ncrpvae::generative::Corpus) {
    let scfg = SynthConfig {
        branching: vec![3],
        elems_per_seq: 6,
        n_seqs: 30,
        feature_dim: 16,
        latent_dim: Some(3),
        separation: 8.0,
        noise: 1.0,
        seed: 5,
        ..Default::default()
    };
    let (corpus, _) = synth_corpus(&scfg).unwrap();
    let cfg = TrainConfig { epochs: 6, latent_dim: 4, seed: 2, ..Default::default() };
    (train(&cfg, &corpus).unwrap().state, corpus)
}

#[test]
fn dot_export_parses_under_third_party_grammar() {
    let (state, corpus) = trained();
    for reps in [0usize, 3] {
        let dot = export_tree(
            &state.tree,
            &state.autoencoder,
            Some(&corpus),
            ExportFormat::Dot,
            reps,
        )
        .unwrap();
        let parsed = graphviz_rust::parse(&dot);
        assert!(parsed.is_ok(), "DOT with {reps} representatives failed to parse: {parsed:?}");
    }
}

#[test]
fn json_export_reloads_as_the_same_tree() {
    let (state, corpus) = trained();
    let json = export_tree(
        &state.tree,
        &state.autoencoder,
        Some(&corpus),
        ExportFormat::Json,
        2,
    )
    .unwrap();
    let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
    let back = TruncatedTree::from_json_doc(&doc).unwrap();
    assert_eq!(back.leaves(), state.tree.leaves());
    assert_eq!(back.n_nodes(), state.tree.n_nodes());
}
