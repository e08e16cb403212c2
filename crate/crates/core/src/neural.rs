//! The autoencoder: one fully connected layer each for z_mean and
//! z_stdev (the latter through exp to stay positive), a reparameterized
//! latent sample, one fully connected decoder layer, squared-error
//! reconstruction, and the closed-form KL of the diagonal-Gaussian
//! posterior against a weighted mixture of isotropic Gaussians.
//! Gradients are exact; the optimizer is RMSProp with exponential
//! learning-rate decay.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense layer, y = W x + b.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine { w: Array2::zeros((out_dim, in_dim)), b: Array1::zeros(out_dim) }
    }

    fn glorot(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Affine { w, b: Array1::zeros(out_dim) }
    }

    pub fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite()) && self.b.iter().all(|v| v.is_finite())
    }
}

/// Encoder heads and decoder. `enc_logstd` produces log standard
/// deviations; they are exponentiated before use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoencoderParams {
    pub enc_mean: Affine,
    pub enc_logstd: Affine,
    pub dec: Affine,
    pub feature_dim: usize,
    pub latent_dim: usize,
}

impl AutoencoderParams {
    pub fn init(feature_dim: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AutoencoderParams {
            enc_mean: Affine::glorot(latent_dim, feature_dim, &mut rng),
            enc_logstd: Affine::glorot(latent_dim, feature_dim, &mut rng),
            dec: Affine::glorot(feature_dim, latent_dim, &mut rng),
            feature_dim,
            latent_dim,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.enc_mean.is_finite() && self.enc_logstd.is_finite() && self.dec.is_finite()
    }

    /// Maps a feature vector to the posterior mean and standard deviation.
    pub fn encode(&self, x: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if x.len() != self.feature_dim {
            return Err(Error::NonFiniteInput(format!(
                "input has dimension {}, expected {}",
                x.len(),
                self.feature_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("encoder input contains a non-finite value".into()));
        }
        let z_mean = self.enc_mean.apply(x);
        let z_stdev = self.enc_logstd.apply(x).mapv(f64::exp);
        Ok((z_mean, z_stdev))
    }

    pub fn decode(&self, z: &Array1<f64>) -> Array1<f64> {
        self.dec.apply(z)
    }
}

/// z = z_mean + z_stdev ⊙ ε with ε ~ N(0, I), so gradients flow through
/// both encoder heads.
pub fn sample_latent(
    z_mean: &Array1<f64>,
    z_stdev: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Array1<f64> {
    let eps = sample_eps(z_mean.len(), rng);
    z_mean + &(z_stdev * &eps)
}

/// The ε draw behind [`sample_latent`], via a dedicated seed.
pub fn sample_latent_seeded(
    z_mean: &Array1<f64>,
    z_stdev: &Array1<f64>,
    rng_seed: u64,
) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_latent(z_mean, z_stdev, &mut rng)
}

pub fn sample_eps(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// The latent prior seen by one element: component means with their
/// assignment weights and the shared isotropic standard deviation.
/// A standard-normal prior is one zero-mean component with sigma 1.
#[derive(Debug, Clone, Copy)]
pub struct PriorView<'a> {
    pub means: &'a [Array1<f64>],
    pub weights: &'a [f64],
    pub sigma: f64,
}

/// Loss split into its two summands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Per-element intermediates cached by the forward pass; everything
/// [`backward`] needs, including the KL gradients with respect to the
/// posterior parameters.
#[derive(Debug, Clone)]
pub struct LossCache {
    x: Array1<f64>,
    eps: Array1<f64>,
    z_stdev: Array1<f64>,
    z: Array1<f64>,
    resid: Array1<f64>,
    dkl_dzmean: Array1<f64>,
    dkl_dzstdev: Array1<f64>,
}

/// Forward pass with a caller-supplied ε, so the loss is a deterministic
/// function of the parameters (finite-difference checks rely on this).
///
/// loss = ½‖x − dec(z)‖² + Σ_p φ_p KL(N(z_mean, diag z_stdev²) ‖ N(μ_p, σ² I))
pub fn loss_with_eps(
    params: &AutoencoderParams,
    x: &Array1<f64>,
    prior: PriorView<'_>,
    eps: &Array1<f64>,
) -> Result<(LossParts, LossCache)> {
    let (z_mean, z_stdev) = params.encode(x)?;
    let z = &z_mean + &(&z_stdev * eps);
    let x_rec = params.decode(&z);
    let resid = &x_rec - x;
    let reconstruction = 0.5 * resid.dot(&resid);

    let sigma2 = prior.sigma * prior.sigma;
    let ln_sigma = prior.sigma.ln();
    let total_weight: f64 = prior.weights.iter().sum();
    let mut kl = 0.0;
    let mut dkl_dzmean = Array1::<f64>::zeros(params.latent_dim);
    for (mu, &w) in prior.means.iter().zip(prior.weights) {
        if w == 0.0 {
            continue;
        }
        let diff = &z_mean - mu;
        let mut component = 0.0;
        for d in 0..params.latent_dim {
            component += ln_sigma - z_stdev[d].ln()
                + (z_stdev[d] * z_stdev[d] + diff[d] * diff[d]) / (2.0 * sigma2)
                - 0.5;
        }
        kl += w * component;
        dkl_dzmean.scaled_add(w / sigma2, &diff);
    }
    let dkl_dzstdev = z_stdev.mapv(|s| total_weight * (s / sigma2 - 1.0 / s));

    let parts = LossParts { total: reconstruction + kl, reconstruction, kl };
    let cache = LossCache {
        x: x.clone(),
        eps: eps.clone(),
        z_stdev,
        z,
        resid,
        dkl_dzmean,
        dkl_dzstdev,
    };
    Ok((parts, cache))
}

/// Forward pass drawing one ε from the rng.
pub fn loss(
    params: &AutoencoderParams,
    x: &Array1<f64>,
    prior: PriorView<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(LossParts, LossCache)> {
    let eps = sample_eps(params.latent_dim, rng);
    loss_with_eps(params, x, prior, &eps)
}

/// Gradients, shaped like the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gradients {
    pub enc_mean: Affine,
    pub enc_logstd: Affine,
    pub dec: Affine,
}

impl Gradients {
    pub fn zeros_like(params: &AutoencoderParams) -> Self {
        Gradients {
            enc_mean: Affine::zeros(params.latent_dim, params.feature_dim),
            enc_logstd: Affine::zeros(params.latent_dim, params.feature_dim),
            dec: Affine::zeros(params.feature_dim, params.latent_dim),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.enc_mean.w += &other.enc_mean.w;
        self.enc_mean.b += &other.enc_mean.b;
        self.enc_logstd.w += &other.enc_logstd.w;
        self.enc_logstd.b += &other.enc_logstd.b;
        self.dec.w += &other.dec.w;
        self.dec.b += &other.dec.b;
    }

    pub fn scale(&mut self, factor: f64) {
        self.enc_mean.w *= factor;
        self.enc_mean.b *= factor;
        self.enc_logstd.w *= factor;
        self.enc_logstd.b *= factor;
        self.dec.w *= factor;
        self.dec.b *= factor;
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    Array2::from_shape_fn((n, m), |(i, j)| a[i] * b[j])
}

/// Exact gradients of the loss for the cached forward pass.
pub fn backward(params: &AutoencoderParams, cache: &LossCache) -> Gradients {
    // reconstruction path
    let d_xrec = cache.resid.clone();
    let dec_w = outer(&d_xrec, &cache.z);
    let d_z = params.dec.w.t().dot(&d_xrec);

    // posterior-parameter paths: z = z_mean + z_stdev ⊙ ε
    let d_zmean = &d_z + &cache.dkl_dzmean;
    let d_zstdev = &d_z * &cache.eps + &cache.dkl_dzstdev;
    let d_logstd = &d_zstdev * &cache.z_stdev;

    Gradients {
        enc_mean: Affine { w: outer(&d_zmean, &cache.x), b: d_zmean },
        enc_logstd: Affine { w: outer(&d_logstd, &cache.x), b: d_logstd },
        dec: Affine { w: dec_w, b: d_xrec },
    }
}

/// RMSProp settings. The learning rate at step t is
/// lr0 · decay^(t / decay_steps) with continuous exponent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RmspropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_steps: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        RmspropConfig {
            learning_rate: 0.01,
            decay: 0.98,
            decay_steps: 1000.0,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Running mean-square accumulators plus the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmspropState {
    pub cfg: RmspropConfig,
    pub sq: Gradients,
    pub t: u64,
}

impl RmspropState {
    pub fn new(params: &AutoencoderParams, cfg: RmspropConfig) -> Self {
        RmspropState { cfg, sq: Gradients::zeros_like(params), t: 0 }
    }

    pub fn effective_rate(&self) -> f64 {
        self.cfg.learning_rate * self.cfg.decay.powf(self.t as f64 / self.cfg.decay_steps)
    }

    /// a ← ρ a + (1−ρ) g²; w ← w − η_t g / √(a + ε).
    pub fn step(&mut self, params: &mut AutoencoderParams, grads: &Gradients) {
        self.t += 1;
        let eta = self.effective_rate();
        let rho = self.cfg.rho;
        let eps = self.cfg.epsilon;
        let apply = |p: &mut Affine, g: &Affine, a: &mut Affine| {
            a.w.zip_mut_with(&g.w, |ai, &gi| *ai = rho * *ai + (1.0 - rho) * gi * gi);
            a.b.zip_mut_with(&g.b, |ai, &gi| *ai = rho * *ai + (1.0 - rho) * gi * gi);
            ndarray::Zip::from(&mut p.w).and(&g.w).and(&a.w).for_each(|pi, &gi, &ai| {
                *pi -= eta * gi / (ai + eps).sqrt();
            });
            ndarray::Zip::from(&mut p.b).and(&g.b).and(&a.b).for_each(|pi, &gi, &ai| {
                *pi -= eta * gi / (ai + eps).sqrt();
            });
        };
        apply(&mut params.enc_mean, &grads.enc_mean, &mut self.sq.enc_mean);
        apply(&mut params.enc_logstd, &grads.enc_logstd, &mut self.sq.enc_logstd);
        apply(&mut params.dec, &grads.dec, &mut self.sq.dec);
    }
}
