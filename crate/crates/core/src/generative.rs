//! Ancestral sampling from the generative model and synthesis of
//! labelled desk-scale corpora with known ground truth.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tree::{absorbing_weights, path_mass, EdgeId, NodeId, TreeNode, TruncatedTree};

/// One sequence of feature vectors with optional per-element labels.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub elements: Vec<Array1<f64>>,
    pub labels: Option<Vec<i64>>,
}

/// A corpus of sequences sharing one feature dimension.
#[derive(Debug, Clone)]
pub struct Corpus {
    sequences: Vec<Sequence>,
    dim: usize,
}

impl Corpus {
    pub fn new(sequences: Vec<Sequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Config("corpus must contain at least one sequence".into()));
        }
        let dim = sequences[0]
            .elements
            .first()
            .map(|e| e.len())
            .ok_or_else(|| Error::Config("sequence 0 is empty".into()))?;
        for (m, seq) in sequences.iter().enumerate() {
            if seq.elements.is_empty() {
                return Err(Error::Config(format!("sequence {m} is empty")));
            }
            if seq.elements.iter().any(|e| e.len() != dim) {
                return Err(Error::Config(format!(
                    "sequence {m} mixes feature dimensions (expected {dim})"
                )));
            }
            if let Some(labels) = &seq.labels {
                if labels.len() != seq.elements.len() {
                    return Err(Error::Config(format!(
                        "sequence {m} has {} labels for {} elements",
                        labels.len(),
                        seq.elements.len()
                    )));
                }
            }
        }
        Ok(Corpus { sequences, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn n_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn total_elements(&self) -> usize {
        self.sequences.iter().map(|s| s.elements.len()).sum()
    }

    pub fn element(&self, m: usize, n: usize) -> &Array1<f64> {
        &self.sequences[m].elements[n]
    }

    /// Iterates `(sequence index, element index, feature vector)`.
    pub fn iter_elements(&self) -> impl Iterator<Item = (usize, usize, &Array1<f64>)> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(m, s)| s.elements.iter().enumerate().map(move |(n, x)| (m, n, x)))
    }

    pub fn has_labels(&self) -> bool {
        self.sequences.iter().any(|s| s.labels.is_some())
    }

    /// Splits off the first `n_train` sequences.
    pub fn split_at(&self, n_train: usize) -> Result<(Corpus, Corpus)> {
        if n_train == 0 || n_train >= self.n_sequences() {
            return Err(Error::Config(format!(
                "cannot split {} sequences at {n_train}",
                self.n_sequences()
            )));
        }
        let train = Corpus::new(self.sequences[..n_train].to_vec())?;
        let test = Corpus::new(self.sequences[n_train..].to_vec())?;
        Ok((train, test))
    }

    /// Writes `sequence_id,element_index,label,f_0..f_{F-1}` rows. Floats
    /// carry 17 significant digits so reading back is bit-exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "sequence_id,element_index,label")?;
        for j in 0..self.dim {
            write!(w, ",f_{j}")?;
        }
        writeln!(w)?;
        for (m, seq) in self.sequences.iter().enumerate() {
            for (n, x) in seq.elements.iter().enumerate() {
                let label = match &seq.labels {
                    Some(l) => l[n].to_string(),
                    None => String::new(),
                };
                write!(w, "{m},{n},{label}")?;
                for v in x.iter() {
                    write!(w, ",{v:.16e}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Schema { row: 0, message: "empty file".into() })?;
        let header = header?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "sequence_id" || cols[1] != "element_index" || cols[2] != "label" {
            return Err(Error::Schema {
                row: 0,
                message: "expected header sequence_id,element_index,label,f_0,...".into(),
            });
        }
        let dim = cols.len() - 3;
        for (j, c) in cols[3..].iter().enumerate() {
            if *c != format!("f_{j}") {
                return Err(Error::Schema {
                    row: 0,
                    message: format!("feature column {j} named {c:?}, expected f_{j}"),
                });
            }
        }

        let mut sequences: Vec<Sequence> = Vec::new();
        for (row, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 3 {
                return Err(Error::Schema {
                    row,
                    message: format!("{} fields, expected {}", fields.len(), dim + 3),
                });
            }
            let m: usize = fields[0].parse().map_err(|_| Error::Schema {
                row,
                message: format!("bad sequence_id {:?}", fields[0]),
            })?;
            let n: usize = fields[1].parse().map_err(|_| Error::Schema {
                row,
                message: format!("bad element_index {:?}", fields[1]),
            })?;
            if m == sequences.len() {
                sequences.push(Sequence { elements: Vec::new(), labels: None });
            } else if m != sequences.len() - 1 {
                return Err(Error::Schema {
                    row,
                    message: format!("sequence_id {m} out of order"),
                });
            }
            let seq = sequences.last_mut().expect("pushed above");
            if n != seq.elements.len() {
                return Err(Error::Schema {
                    row,
                    message: format!("element_index {n} out of order (expected {})", seq.elements.len()),
                });
            }
            let label = fields[2];
            if n == 0 {
                seq.labels = if label.is_empty() { None } else { Some(Vec::new()) };
            }
            match (&mut seq.labels, label.is_empty()) {
                (None, true) => {}
                (Some(ls), false) => ls.push(label.parse().map_err(|_| Error::Schema {
                    row,
                    message: format!("bad label {label:?}"),
                })?),
                _ => {
                    return Err(Error::Schema {
                        row,
                        message: "sequence mixes labelled and unlabelled elements".into(),
                    })
                }
            }
            let mut x = Vec::with_capacity(dim);
            for f in &fields[3..] {
                let v: f64 = f.parse().map_err(|_| Error::Schema {
                    row,
                    message: format!("non-numeric feature {f:?}"),
                })?;
                x.push(v);
            }
            seq.elements.push(Array1::from_vec(x));
        }
        Corpus::new(sequences)
    }
}

/// What the synthesizer knows about the corpus it generated.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// The tree the data was generated from.
    pub tree: TruncatedTree,
    /// Leaf assignment of every element.
    pub path_of: Vec<Vec<NodeId>>,
    /// The latent vector every element was emitted from.
    pub latents: Vec<Vec<Array1<f64>>>,
}

impl GroundTruth {
    /// Ground-truth leaf index (path index in depth-first order) per element.
    pub fn leaf_indices(&self) -> Vec<Vec<usize>> {
        let leaves = self.tree.leaves();
        self.path_of
            .iter()
            .map(|seq| {
                seq.iter()
                    .map(|p| leaves.iter().position(|l| l == p).expect("leaf of tree"))
                    .collect()
            })
            .collect()
    }
}

/// Draws a parameter vector per node, top-down: the root from
/// N(α*, σ_N² I) and every other node from its parent's draw.
pub fn sample_node_params(
    tree: &TruncatedTree,
    rng_seed: u64,
) -> BTreeMap<NodeId, Array1<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = BTreeMap::new();
    fn walk(
        node: &TreeNode,
        id: &NodeId,
        parent: &Array1<f64>,
        sigma_n: f64,
        rng: &mut ChaCha8Rng,
        out: &mut BTreeMap<NodeId, Array1<f64>>,
    ) {
        let alpha = parent.mapv(|m| m + sigma_n * rng.sample::<f64, _>(StandardNormal));
        for (k, child) in node.children.iter().enumerate() {
            walk(child, &id.child(k as u32 + 1), &alpha, sigma_n, rng, out);
        }
        out.insert(id.clone(), alpha);
    }
    walk(tree.root(), &NodeId::root(), &tree.alpha_star, tree.sigma_n, &mut rng, &mut out);
    out
}

/// Everything drawn for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceDraw {
    pub edge_weights: BTreeMap<EdgeId, f64>,
    pub paths: Vec<NodeId>,
    pub latents: Vec<Array1<f64>>,
}

/// Draws per-edge stick weights v ~ Beta(1, γ*), then paths and latents.
pub fn sample_sequence(
    tree: &TruncatedTree,
    params: &BTreeMap<NodeId, Array1<f64>>,
    gamma_star: f64,
    n_elems: usize,
    sigma_d: f64,
    rng_seed: u64,
) -> Result<SequenceDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let beta = Beta::new(1.0, gamma_star)
        .map_err(|e| Error::Config(format!("gamma_star: {e}")))?;
    let mut weights = BTreeMap::new();
    for e in tree.edges() {
        weights.insert(e, beta.sample(&mut rng));
    }
    sample_sequence_with_weights(tree, params, &weights, n_elems, sigma_d, &mut rng)
}

/// As [`sample_sequence`] but with the stick weights fixed by the caller.
/// The rightmost sibling at every node absorbs the residual mass so the
/// path distribution is proper.
pub fn sample_sequence_with_weights(
    tree: &TruncatedTree,
    params: &BTreeMap<NodeId, Array1<f64>>,
    weights: &BTreeMap<EdgeId, f64>,
    n_elems: usize,
    sigma_d: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SequenceDraw> {
    if n_elems == 0 {
        return Err(Error::Config("a sequence needs at least one element".into()));
    }
    if sigma_d < 0.0 {
        return Err(Error::Config("sigma_d must be nonnegative".into()));
    }
    let leaves = tree.leaves();
    let eff = absorbing_weights(tree, weights);
    let mut probs = Vec::with_capacity(leaves.len());
    for p in &leaves {
        probs.push(path_mass(&eff, p)?);
    }

    let mut paths = Vec::with_capacity(n_elems);
    let mut latents = Vec::with_capacity(n_elems);
    for _ in 0..n_elems {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = leaves.len() - 1;
        for (k, &pr) in probs.iter().enumerate() {
            acc += pr;
            if u < acc {
                idx = k;
                break;
            }
        }
        let leaf = &leaves[idx];
        let alpha = params
            .get(leaf)
            .ok_or_else(|| Error::InvalidPath(format!("no parameter for leaf {leaf}")))?;
        let z = alpha.mapv(|a| a + sigma_d * rng.sample::<f64, _>(StandardNormal));
        paths.push(leaf.clone());
        latents.push(z);
    }
    Ok(SequenceDraw { edge_weights: weights.clone(), paths, latents })
}

/// Configuration for the synthetic corpus generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Children per level; `[3, 2]` builds 3 level-1 nodes with 2 leaves each.
    pub branching: Vec<usize>,
    pub elems_per_seq: usize,
    pub n_seqs: usize,
    pub feature_dim: usize,
    /// Dimension of the generating latent space; defaults to the leaf count.
    pub latent_dim: Option<usize>,
    /// Distance scale between leaf parameters.
    pub separation: f64,
    /// Emission noise in latent space and additive noise in feature space.
    pub noise: f64,
    /// Use the identity lift (requires feature_dim == latent_dim) instead
    /// of a random orthonormal one.
    pub identity_lift: bool,
    pub gamma_star: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            branching: vec![3, 2],
            elems_per_seq: 20,
            n_seqs: 200,
            feature_dim: 64,
            latent_dim: None,
            separation: 10.0,
            noise: 1.0,
            identity_lift: false,
            gamma_star: 1.0,
            seed: 0,
        }
    }
}

/// Builds a fixed tree with well-separated leaf parameters, samples
/// sequences from it, and lifts the latents to feature space through a
/// fixed linear map plus Gaussian noise. Labels are leaf identities.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Corpus, GroundTruth)> {
    if cfg.branching.is_empty() || cfg.branching.iter().any(|&b| b == 0) {
        return Err(Error::Config("branching must be a nonempty list of positive counts".into()));
    }
    if cfg.n_seqs == 0 || cfg.elems_per_seq == 0 {
        return Err(Error::Config("n_seqs and elems_per_seq must be positive".into()));
    }
    let n_leaves: usize = cfg.branching.iter().product();
    let latent_dim = cfg.latent_dim.unwrap_or(n_leaves);
    if latent_dim < n_leaves {
        return Err(Error::Config(format!(
            "latent_dim {latent_dim} cannot place {n_leaves} separated leaves"
        )));
    }
    if cfg.feature_dim < latent_dim {
        return Err(Error::Config(format!(
            "feature_dim {} must be at least the latent dimension {latent_dim}",
            cfg.feature_dim
        )));
    }
    if cfg.identity_lift && cfg.feature_dim != latent_dim {
        return Err(Error::Config("identity lift requires feature_dim == latent_dim".into()));
    }

    // Leaf k sits at separation * e_k, so any two leaves are separation*sqrt(2)
    // apart; internal nodes average their children.
    let sigma_floor = cfg.noise.max(1e-9);
    let mut leaf_counter = 0usize;
    fn build(
        branching: &[usize],
        latent_dim: usize,
        separation: f64,
        sigma: f64,
        counter: &mut usize,
    ) -> TreeNode {
        if branching.is_empty() {
            let mut mu = Array1::zeros(latent_dim);
            mu[*counter] = separation;
            *counter += 1;
            return TreeNode::leaf(mu, sigma);
        }
        let children: Vec<TreeNode> = (0..branching[0])
            .map(|_| build(&branching[1..], latent_dim, separation, sigma, counter))
            .collect();
        let mut mu = Array1::zeros(latent_dim);
        for c in &children {
            mu = mu + &c.mu;
        }
        mu /= children.len() as f64;
        TreeNode { mu, sigma, children }
    }
    let root = build(&cfg.branching, latent_dim, cfg.separation, sigma_floor, &mut leaf_counter);
    let tree = TruncatedTree::new(
        root,
        Array1::zeros(latent_dim),
        cfg.gamma_star,
        cfg.separation.max(1e-9),
        sigma_floor,
    )?;
    let leaves = tree.leaves();
    let params: BTreeMap<NodeId, Array1<f64>> = tree
        .all_nodes()
        .into_iter()
        .map(|id| {
            let mu = tree.node(&id).expect("node exists").mu.clone();
            (id, mu)
        })
        .collect();

    let lift = if cfg.identity_lift {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xAB));
        Some(orthonormal_columns(cfg.feature_dim, latent_dim, &mut rng))
    };

    let mut sequences = Vec::with_capacity(cfg.n_seqs);
    let mut path_of = Vec::with_capacity(cfg.n_seqs);
    let mut latents = Vec::with_capacity(cfg.n_seqs);
    for m in 0..cfg.n_seqs {
        let draw = sample_sequence(
            &tree,
            &params,
            cfg.gamma_star,
            cfg.elems_per_seq,
            cfg.noise,
            mix_seed(cfg.seed, 1 + m as u64),
        )?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1_0000 + m as u64));
        let mut elements = Vec::with_capacity(cfg.elems_per_seq);
        let mut labels = Vec::with_capacity(cfg.elems_per_seq);
        for (z, p) in draw.latents.iter().zip(&draw.paths) {
            let mut x = match &lift {
                Some(q) => apply_columns(q, z),
                None => z.clone(),
            };
            if cfg.noise > 0.0 {
                x.mapv_inplace(|v| v + cfg.noise * noise_rng.sample::<f64, _>(StandardNormal));
            }
            elements.push(x);
            labels.push(leaves.iter().position(|l| l == p).expect("leaf") as i64);
        }
        sequences.push(Sequence { elements, labels: Some(labels) });
        path_of.push(draw.paths);
        latents.push(draw.latents);
    }

    let corpus = Corpus::new(sequences)?;
    Ok((corpus, GroundTruth { tree, path_of, latents }))
}

/// SplitMix64-style mixing used to derive independent seed streams.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `k` orthonormal columns of length `n` (Gram-Schmidt on Gaussian draws).
fn orthonormal_columns(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Array1<f64> =
            Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for c in &cols {
            let proj = v.dot(c);
            v = v - proj * c;
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    cols
}

fn apply_columns(cols: &[Array1<f64>], z: &Array1<f64>) -> Array1<f64> {
    let mut x = Array1::zeros(cols[0].len());
    for (c, &zj) in cols.iter().zip(z.iter()) {
        x = x + zj * c;
    }
    x
}
