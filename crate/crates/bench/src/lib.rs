//! Shared fixtures for the criterion benchmarks.

use ncrpvae::generative::{synth_corpus, Corpus, SynthConfig};
use ncrpvae::trainer::{init_state, refresh_latents, ModelState, TrainConfig};
use ncrpvae::variational::{vi_sweep, LatentTable};

/// A mid-size synthetic corpus: 50 sequences of 20 elements in 64
/// feature dimensions, six planted clusters.
pub fn bench_corpus() -> Corpus {
    let cfg = SynthConfig {
        branching: vec![3, 2],
        elems_per_seq: 20,
        n_seqs: 50,
        feature_dim: 64,
        separation: 10.0,
        noise: 1.0,
        seed: 99,
        ..Default::default()
    };
    synth_corpus(&cfg).expect("bench corpus").0
}

pub fn bench_config() -> TrainConfig {
    TrainConfig { epochs: 1, ..Default::default() }
}

/// Fresh model state with latents refreshed and a couple of sweeps
/// applied so the variational state is past its uniform initialization.
pub fn warmed_state(corpus: &Corpus) -> (ModelState, LatentTable) {
    let cfg = bench_config();
    let mut state = init_state(&cfg, corpus).expect("state");
    let latents = refresh_latents(&state.autoencoder, corpus).expect("latents");
    for _ in 0..2 {
        vi_sweep(&mut state.tree, &mut state.var_states, &latents).expect("sweep");
    }
    (state, latents)
}
