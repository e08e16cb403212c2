//! Thin reference baselines for directional comparison: K-Means with a
//! majority-vote labelling protocol, an autoencoder trained against the
//! fixed standard-normal prior, and an autoencoder trained against a
//! flat Gaussian-mixture prior refit on the latent codes each round.
//! None of these is a tuned system.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generative::{mix_seed, Corpus};
use crate::math::log_normalize;
use crate::neural::{backward, loss_with_eps, sample_eps, AutoencoderParams, Gradients, PriorView, RmspropState};
use crate::trainer::{nn_epoch, EpochPrior, TrainConfig};

const SEED_NN_INIT: u64 = 0x22;
const SEED_EPOCH: u64 = 0xE000_0000;
const SEED_KMEANS: u64 = 0x3000_0000;

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = a - b;
    diff.dot(&diff)
}

/// Lloyd's algorithm with k-means++ seeding, best of `n_init` restarts.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Array1<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

pub fn kmeans_fit(
    points: &[Array1<f64>],
    k: usize,
    n_init: usize,
    max_iter: usize,
    seed: u64,
) -> Result<KMeansFit> {
    if points.is_empty() || k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "cannot cluster {} points into {k} groups",
            points.len()
        )));
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SEED_KMEANS + restart as u64));
        let mut centroids = plus_plus_seed(points, k, &mut rng);
        let mut assignments = vec![0usize; points.len()];
        for _ in 0..max_iter {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut arg = 0;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = sq_dist(p, centroid);
                    if d < best_d {
                        best_d = d;
                        arg = c;
                    }
                }
                if assignments[i] != arg {
                    assignments[i] = arg;
                    changed = true;
                }
            }
            let mut sums = vec![Array1::<f64>::zeros(points[0].len()); k];
            let mut counts = vec![0usize; k];
            for (i, p) in points.iter().enumerate() {
                sums[assignments[i]] += p;
                counts[assignments[i]] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centroids[c] = &sums[c] / counts[c] as f64;
                } else {
                    // re-seed an empty cluster at the point farthest from
                    // its current centroid
                    let far = points
                        .iter()
                        .enumerate()
                        .max_by(|a, b| {
                            sq_dist(a.1, &centroids[assignments[a.0]])
                                .partial_cmp(&sq_dist(b.1, &centroids[assignments[b.0]]))
                                .expect("finite")
                        })
                        .expect("nonempty");
                    centroids[c] = far.1.clone();
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        if best.as_ref().map(|b| inertia < b.inertia).unwrap_or(true) {
            best = Some(KMeansFit { centroids, assignments, inertia });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_seed(points: &[Array1<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centroids.push(points[rng.gen_range(0..points.len())].clone());
            continue;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            u -= d;
            if u <= 0.0 {
                pick = i;
                break;
            }
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

pub fn nearest_centroid(centroids: &[Array1<f64>], x: &Array1<f64>) -> usize {
    let mut arg = 0;
    let mut best = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(x, centroid);
        if d < best {
            best = d;
            arg = c;
        }
    }
    arg
}

/// Majority class per cluster; empty clusters get the overall majority.
pub fn majority_labels(clusters: &[usize], labels: &[i64], k: usize) -> Vec<i64> {
    let mut counts: Vec<BTreeMap<i64, usize>> = vec![BTreeMap::new(); k];
    let mut overall: BTreeMap<i64, usize> = BTreeMap::new();
    for (&c, &l) in clusters.iter().zip(labels) {
        *counts[c].entry(l).or_insert(0) += 1;
        *overall.entry(l).or_insert(0) += 1;
    }
    let mode = |m: &BTreeMap<i64, usize>| -> Option<i64> {
        let mut best: Option<(i64, usize)> = None;
        for (&class, &count) in m {
            match best {
                Some((_, c)) if count <= c => {}
                _ => best = Some((class, count)),
            }
        }
        best.map(|(c, _)| c)
    };
    let fallback = mode(&overall).unwrap_or(0);
    counts.iter().map(|m| mode(m).unwrap_or(fallback)).collect()
}

fn labelled_elements(corpus: &Corpus) -> Result<(Vec<Array1<f64>>, Vec<i64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for seq in corpus.sequences() {
        if let Some(labels) = &seq.labels {
            for (x, &l) in seq.elements.iter().zip(labels) {
                xs.push(x.clone());
                ys.push(l);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::MissingLabels);
    }
    Ok((xs, ys))
}

/// Clusters the training features, labels clusters by majority vote, and
/// scores nearest-centroid predictions on the test corpus.
pub fn kmeans_classify(
    train: &Corpus,
    test: &Corpus,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let (train_x, train_y) = labelled_elements(train)?;
    let (test_x, test_y) = labelled_elements(test)?;
    let fit = kmeans_fit(&train_x, k, 4, 100, seed)?;
    let cluster_labels = majority_labels(&fit.assignments, &train_y, k);
    let correct = test_x
        .iter()
        .zip(&test_y)
        .filter(|(x, &y)| cluster_labels[nearest_centroid(&fit.centroids, x)] == y)
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// Trains the same autoencoder architecture against the fixed N(0, I)
/// prior, with the trainer's seed protocol (same init and epoch
/// streams), so runs are directly comparable to the tree-prior model.
pub fn train_std_normal(cfg: &TrainConfig, corpus: &Corpus) -> Result<AutoencoderParams> {
    cfg.validate()?;
    let mut params =
        AutoencoderParams::init(corpus.dim(), cfg.latent_dim, mix_seed(cfg.seed, SEED_NN_INIT));
    let mut opt = RmspropState::new(&params, cfg.optimizer);
    let means = vec![Array1::zeros(cfg.latent_dim)];
    let weights = vec![1.0];
    for round in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SEED_EPOCH + round as u64));
        nn_epoch(
            &mut params,
            &mut opt,
            corpus,
            EpochPrior::Fixed { means: &means, weights: &weights, sigma: 1.0 },
            cfg.batch_size,
            round,
            &mut rng,
        )?;
    }
    Ok(params)
}

/// A flat Gaussian-mixture prior VAE: each round runs one epoch of
/// network updates against the current responsibilities, then refits the
/// mixture means on the fresh posterior means.
pub struct GmmVae {
    pub params: AutoencoderParams,
    pub means: Vec<Array1<f64>>,
}

pub fn train_vae_gmm(cfg: &TrainConfig, corpus: &Corpus, k: usize) -> Result<GmmVae> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    let mut params =
        AutoencoderParams::init(corpus.dim(), cfg.latent_dim, mix_seed(cfg.seed, SEED_NN_INIT));
    let mut opt = RmspropState::new(&params, cfg.optimizer);
    let sigma = cfg.sigma_d;
    let total = corpus.total_elements();

    // component means seeded from encoded data points
    let mut seed_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6333));
    let all: Vec<(usize, usize)> = corpus.iter_elements().map(|(m, n, _)| (m, n)).collect();
    let mut means: Vec<Array1<f64>> = (0..k)
        .map(|_| {
            let (m, n) = all[seed_rng.gen_range(0..all.len())];
            params.encode(corpus.element(m, n)).map(|(zm, _)| zm)
        })
        .collect::<Result<_>>()?;
    let mut resp: Vec<Vec<f64>> = vec![vec![1.0 / k as f64; k]; total];

    for round in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SEED_EPOCH + round as u64));
        let mut order: Vec<(usize, (usize, usize))> = all.iter().copied().enumerate().collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&params);
            for &(flat, (m, n)) in batch {
                let eps = sample_eps(cfg.latent_dim, &mut rng);
                let view = PriorView { means: &means, weights: &resp[flat], sigma };
                let (parts, cache) = loss_with_eps(&params, corpus.element(m, n), view, &eps)?;
                if !parts.total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite mixture-prior loss at round {round}"
                    )));
                }
                grads.add_assign(&backward(&params, &cache));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut params, &grads);
        }

        // E step on the fresh codes, then M step on the means
        let mut sums = vec![Array1::<f64>::zeros(cfg.latent_dim); k];
        let mut mass = vec![0.0f64; k];
        for (flat, &(m, n)) in all.iter().enumerate() {
            let (zm, _) = params.encode(corpus.element(m, n))?;
            let mut log_r: Vec<f64> = means
                .iter()
                .map(|mu| -sq_dist(&zm, mu) / (2.0 * sigma * sigma))
                .collect();
            if !log_normalize(&mut log_r) {
                return Err(Error::Numerical("mixture responsibilities collapsed".into()));
            }
            for (c, &r) in log_r.iter().enumerate() {
                sums[c].scaled_add(r, &zm);
                mass[c] += r;
            }
            resp[flat] = log_r;
        }
        for c in 0..k {
            if mass[c] > 1e-12 {
                means[c] = &sums[c] / mass[c];
            }
        }
    }
    Ok(GmmVae { params, means })
}

/// Majority-vote classification through the mixture components, mirroring
/// the K-Means protocol but in latent space.
pub fn gmm_classify(model: &GmmVae, train: &Corpus, test: &Corpus) -> Result<f64> {
    let (train_x, train_y) = labelled_elements(train)?;
    let (test_x, test_y) = labelled_elements(test)?;
    let encode_all = |xs: &[Array1<f64>]| -> Result<Vec<Array1<f64>>> {
        xs.iter().map(|x| model.params.encode(x).map(|(zm, _)| zm)).collect()
    };
    let train_z = encode_all(&train_x)?;
    let test_z = encode_all(&test_x)?;
    let clusters: Vec<usize> =
        train_z.iter().map(|z| nearest_centroid(&model.means, z)).collect();
    let labels = majority_labels(&clusters, &train_y, model.means.len());
    let correct = test_z
        .iter()
        .zip(&test_y)
        .filter(|(z, &y)| labels[nearest_centroid(&model.means, z)] == y)
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generative::{synth_corpus, SynthConfig};

    #[test]
    fn kmeans_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let c = (i % 3) as f64 * 10.0;
            truth.push((i % 3) as i64);
            points.push(Array1::from_vec(vec![
                c + rng.gen::<f64>(),
                -c + rng.gen::<f64>(),
            ]));
        }
        let fit = kmeans_fit(&points, 3, 4, 100, 0).unwrap();
        let labels = majority_labels(&fit.assignments, &truth, 3);
        let correct = points
            .iter()
            .zip(&truth)
            .filter(|(p, &t)| labels[nearest_centroid(&fit.centroids, p)] == t)
            .count();
        assert_eq!(correct, 60);
    }

    #[test]
    fn kmeans_rejects_bad_sizes() {
        let points = vec![Array1::zeros(2); 3];
        assert!(kmeans_fit(&points, 0, 1, 10, 0).is_err());
        assert!(kmeans_fit(&points, 4, 1, 10, 0).is_err());
    }

    #[test]
    fn kmeans_classify_on_synthetic_corpus() {
        let cfg = SynthConfig {
            branching: vec![3],
            elems_per_seq: 8,
            n_seqs: 30,
            feature_dim: 16,
            latent_dim: Some(3),
            separation: 10.0,
            noise: 1.0,
            seed: 2,
            ..Default::default()
        };
        let (corpus, _) = synth_corpus(&cfg).unwrap();
        let (train, test) = corpus.split_at(24).unwrap();
        let acc = kmeans_classify(&train, &test, 3, 0).unwrap();
        assert!(acc >= 0.95, "separated blobs should classify well, got {acc}");
    }

    #[test]
    fn std_normal_training_is_deterministic_and_learns() {
        let cfg = SynthConfig {
            branching: vec![2],
            elems_per_seq: 5,
            n_seqs: 10,
            feature_dim: 8,
            latent_dim: Some(2),
            separation: 6.0,
            noise: 0.5,
            seed: 3,
            ..Default::default()
        };
        let (corpus, _) = synth_corpus(&cfg).unwrap();
        let tcfg = TrainConfig { epochs: 5, latent_dim: 3, ..Default::default() };
        let a = train_std_normal(&tcfg, &corpus).unwrap();
        let b = train_std_normal(&tcfg, &corpus).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let (_, mean0) = crate::eval::test_loglik(
            &AutoencoderParams::init(corpus.dim(), 3, mix_seed(tcfg.seed, SEED_NN_INIT)),
            &corpus,
            32,
            0,
        )
        .unwrap();
        let (_, mean1) = crate::eval::test_loglik(&a, &corpus, 32, 0).unwrap();
        assert!(mean1 > mean0, "training should improve the likelihood: {mean0} -> {mean1}");
    }

    #[test]
    fn gmm_vae_runs_and_classifies_blobs() {
        let cfg = SynthConfig {
            branching: vec![3],
            elems_per_seq: 6,
            n_seqs: 24,
            feature_dim: 12,
            latent_dim: Some(3),
            separation: 10.0,
            noise: 0.8,
            seed: 4,
            ..Default::default()
        };
        let (corpus, _) = synth_corpus(&cfg).unwrap();
        let (train, test) = corpus.split_at(18).unwrap();
        let tcfg = TrainConfig { epochs: 10, latent_dim: 4, sigma_d: 1.0, ..Default::default() };
        let model = train_vae_gmm(&tcfg, &train, 3).unwrap();
        let acc = gmm_classify(&model, &train, &test).unwrap();
        assert!(acc >= 0.8, "mixture-prior baseline should separate blobs, got {acc}");
    }
}
