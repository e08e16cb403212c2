//! Evaluation of a trained model: nearest-leaf assignment, majority-vote
//! node labelling, classification accuracy, retrieval F1, Monte Carlo
//! test log-likelihood, corpus ingestion, hierarchy export, and cluster
//! purity.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generative::Corpus;
use crate::neural::{sample_latent, AutoencoderParams};
use crate::tree::{NodeId, TruncatedTree};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Encodes `x` and returns the leaf whose mean is closest to the
/// posterior mean; ties break toward the depth-first-earlier leaf.
pub fn assign_leaf(
    tree: &TruncatedTree,
    params: &AutoencoderParams,
    x: &Array1<f64>,
) -> Result<NodeId> {
    let leaves = tree.leaves();
    let (z_mean, _) = params.encode(x)?;
    Ok(leaves[nearest_leaf_index(tree, &leaves, &z_mean)].clone())
}

fn nearest_leaf_index(tree: &TruncatedTree, leaves: &[NodeId], z_mean: &Array1<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (idx, leaf) in leaves.iter().enumerate() {
        let mu = &tree.node(leaf).expect("leaf exists").mu;
        let diff = z_mean - mu;
        let d = diff.dot(&diff);
        if d < best_d {
            best_d = d;
            best = idx;
        }
    }
    best
}

/// Leaf index of every element under nearest-mean assignment.
pub fn assign_all(
    tree: &TruncatedTree,
    params: &AutoencoderParams,
    corpus: &Corpus,
) -> Result<Vec<Vec<usize>>> {
    let leaves = tree.leaves();
    let mut out = Vec::with_capacity(corpus.n_sequences());
    for seq in corpus.sequences() {
        let mut row = Vec::with_capacity(seq.elements.len());
        for x in &seq.elements {
            let (z_mean, _) = params.encode(x)?;
            row.push(nearest_leaf_index(tree, &leaves, &z_mean));
        }
        out.push(row);
    }
    Ok(out)
}

fn mode_label(counts: &BTreeMap<i64, usize>) -> Option<i64> {
    let mut best: Option<(i64, usize)> = None;
    for (&class, &count) in counts {
        match best {
            Some((_, c)) if count <= c => {}
            _ => best = Some((class, count)),
        }
    }
    best.map(|(class, _)| class)
}

/// Majority-vote class per node. Leaves take the mode of the labels of
/// the elements assigned to them (ties to the smallest class id);
/// internal nodes take the mode over their whole subtree; empty leaves
/// inherit the parent's class.
pub fn label_nodes(
    tree: &TruncatedTree,
    params: &AutoencoderParams,
    corpus: &Corpus,
) -> Result<BTreeMap<NodeId, i64>> {
    if !corpus.has_labels() {
        return Err(Error::MissingLabels);
    }
    let leaves = tree.leaves();
    let assignments = assign_all(tree, params, corpus)?;
    let mut leaf_counts: Vec<BTreeMap<i64, usize>> = vec![BTreeMap::new(); leaves.len()];
    for (m, seq) in corpus.sequences().iter().enumerate() {
        if let Some(labels) = &seq.labels {
            for (n, &label) in labels.iter().enumerate() {
                *leaf_counts[assignments[m][n]].entry(label).or_insert(0) += 1;
            }
        }
    }

    // subtree-aggregated counts per node
    let mut node_counts: BTreeMap<NodeId, BTreeMap<i64, usize>> = BTreeMap::new();
    for id in tree.internal_nodes_bottom_up() {
        node_counts.insert(id, BTreeMap::new());
    }
    for (idx, leaf) in leaves.iter().enumerate() {
        node_counts.insert(leaf.clone(), leaf_counts[idx].clone());
    }
    // bottom-up accumulation into ancestors
    let mut ordered: Vec<NodeId> = tree.all_nodes();
    ordered.sort_by_key(|id| std::cmp::Reverse(id.depth()));
    for id in &ordered {
        if let Some(parent) = id.parent() {
            let own = node_counts.get(id).cloned().unwrap_or_default();
            let up = node_counts.entry(parent).or_default();
            for (class, count) in own {
                *up.entry(class).or_insert(0) += count;
            }
        }
    }

    // top-down resolution; empty nodes inherit the parent's class
    let mut labels: BTreeMap<NodeId, i64> = BTreeMap::new();
    for id in tree.all_nodes() {
        let own = node_counts.get(&id).and_then(mode_label);
        let resolved = match own {
            Some(class) => class,
            None => match id.parent() {
                Some(parent) => labels[&parent],
                None => return Err(Error::MissingLabels),
            },
        };
        labels.insert(id, resolved);
    }
    Ok(labels)
}

/// Accuracy of predicting element labels through nearest-leaf assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyOutcome {
    pub per_class: BTreeMap<i64, f64>,
    pub aggregate: f64,
}

pub fn classify(
    tree: &TruncatedTree,
    params: &AutoencoderParams,
    node_labels: &BTreeMap<NodeId, i64>,
    corpus: &Corpus,
) -> Result<ClassifyOutcome> {
    if !corpus.has_labels() {
        return Err(Error::MissingLabels);
    }
    let leaves = tree.leaves();
    for leaf in &leaves {
        if !node_labels.contains_key(leaf) {
            return Err(Error::Config(format!("node labels missing leaf {leaf}")));
        }
    }
    let assignments = assign_all(tree, params, corpus)?;
    let mut correct: BTreeMap<i64, usize> = BTreeMap::new();
    let mut totals: BTreeMap<i64, usize> = BTreeMap::new();
    for (m, seq) in corpus.sequences().iter().enumerate() {
        if let Some(labels) = &seq.labels {
            for (n, &truth) in labels.iter().enumerate() {
                let pred = node_labels[&leaves[assignments[m][n]]];
                *totals.entry(truth).or_insert(0) += 1;
                if pred == truth {
                    *correct.entry(truth).or_insert(0) += 1;
                }
            }
        }
    }
    let per_class: BTreeMap<i64, f64> = totals
        .iter()
        .map(|(&class, &total)| {
            (class, correct.get(&class).copied().unwrap_or(0) as f64 / total as f64)
        })
        .collect();
    let total: usize = totals.values().sum();
    let hits: usize = correct.values().sum();
    Ok(ClassifyOutcome { per_class, aggregate: hits as f64 / total as f64 })
}

/// Retrieval quality per class and micro-averaged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    /// `None` for classes absent from the test corpus.
    pub per_class: BTreeMap<i64, Option<f64>>,
    pub aggregate: f64,
}

pub fn retrieve_f1(
    tree: &TruncatedTree,
    params: &AutoencoderParams,
    node_labels: &BTreeMap<NodeId, i64>,
    corpus: &Corpus,
) -> Result<RetrievalOutcome> {
    if !corpus.has_labels() {
        return Err(Error::MissingLabels);
    }
    let leaves = tree.leaves();
    let assignments = assign_all(tree, params, corpus)?;
    let mut truths = Vec::new();
    let mut preds = Vec::new();
    for (m, seq) in corpus.sequences().iter().enumerate() {
        if let Some(labels) = &seq.labels {
            for (n, &truth) in labels.iter().enumerate() {
                truths.push(truth);
                preds.push(node_labels[&leaves[assignments[m][n]]]);
            }
        }
    }

    let mut classes: std::collections::BTreeSet<i64> = truths.iter().copied().collect();
    classes.extend(node_labels.values().copied());

    let mut per_class = BTreeMap::new();
    let (mut tp_sum, mut fp_sum, mut fn_sum) = (0usize, 0usize, 0usize);
    for &class in &classes {
        let retrieved: usize = preds.iter().filter(|&&p| p == class).count();
        let relevant: usize = truths.iter().filter(|&&t| t == class).count();
        let tp: usize = preds
            .iter()
            .zip(&truths)
            .filter(|(&p, &t)| p == class && t == class)
            .count();
        if relevant == 0 {
            per_class.insert(class, None);
            continue;
        }
        tp_sum += tp;
        fp_sum += retrieved - tp;
        fn_sum += relevant - tp;
        let f1 = if retrieved == 0 || tp == 0 {
            0.0
        } else {
            let p = tp as f64 / retrieved as f64;
            let r = tp as f64 / relevant as f64;
            2.0 * p * r / (p + r)
        };
        per_class.insert(class, Some(f1));
    }
    let aggregate = if tp_sum == 0 {
        0.0
    } else {
        2.0 * tp_sum as f64 / (2.0 * tp_sum as f64 + fp_sum as f64 + fn_sum as f64)
    };
    Ok(RetrievalOutcome { per_class, aggregate })
}

/// Monte Carlo estimate of E_{z~q(z|x)}[log p(x|z)] per element under
/// the unit-variance Gaussian decoder, returned as (sum, mean) over the
/// corpus.
pub fn test_loglik(
    params: &AutoencoderParams,
    corpus: &Corpus,
    samples_per_element: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples_per_element == 0 {
        return Err(Error::Config("samples_per_element must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_dim = corpus.dim() as f64;
    let constant = -0.5 * f_dim * LN_2PI;
    let mut sum = 0.0;
    for (_, _, x) in corpus.iter_elements() {
        let (z_mean, z_stdev) = params.encode(x)?;
        let mut acc = 0.0;
        for _ in 0..samples_per_element {
            let z = sample_latent(&z_mean, &z_stdev, &mut rng);
            let resid = &params.decode(&z) - x;
            acc += constant - 0.5 * resid.dot(&resid);
        }
        sum += acc / samples_per_element as f64;
    }
    let mean = sum / corpus.total_elements() as f64;
    Ok((sum, mean))
}

/// How many elements land on each leaf under nearest-mean assignment.
pub fn path_histogram(
    tree: &TruncatedTree,
    params: &AutoencoderParams,
    corpus: &Corpus,
) -> Result<BTreeMap<NodeId, usize>> {
    let leaves = tree.leaves();
    let assignments = assign_all(tree, params, corpus)?;
    let mut hist: BTreeMap<NodeId, usize> = leaves.iter().map(|l| (l.clone(), 0)).collect();
    for row in &assignments {
        for &idx in row {
            *hist.get_mut(&leaves[idx]).expect("leaf") += 1;
        }
    }
    Ok(hist)
}

/// The full evaluation document emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_accuracy: BTreeMap<i64, f64>,
    pub aggregate_accuracy: f64,
    pub per_class_f1: BTreeMap<i64, Option<f64>>,
    pub aggregate_f1: f64,
    pub loglik_sum: f64,
    pub loglik_mean: f64,
    pub path_histogram: BTreeMap<NodeId, usize>,
}

/// Labels nodes on `label_corpus`, scores `test_corpus`.
pub fn evaluate(
    tree: &TruncatedTree,
    params: &AutoencoderParams,
    label_corpus: &Corpus,
    test_corpus: &Corpus,
    samples_per_element: usize,
    seed: u64,
) -> Result<EvalReport> {
    let node_labels = label_nodes(tree, params, label_corpus)?;
    let cls = classify(tree, params, &node_labels, test_corpus)?;
    let ret = retrieve_f1(tree, params, &node_labels, test_corpus)?;
    let (loglik_sum, loglik_mean) = test_loglik(params, test_corpus, samples_per_element, seed)?;
    let hist = path_histogram(tree, params, test_corpus)?;
    Ok(EvalReport {
        per_class_accuracy: cls.per_class,
        aggregate_accuracy: cls.aggregate,
        per_class_f1: ret.per_class,
        aggregate_f1: ret.aggregate,
        loglik_sum,
        loglik_mean,
        path_histogram: hist,
    })
}

/// Reads a corpus CSV file.
pub fn ingest(path: &Path) -> Result<Corpus> {
    let file = File::open(path)?;
    Corpus::read_csv(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Dot,
}

/// Exports the hierarchy with per-node representatives: the k elements
/// closest to each node's mean among the elements assigned into its
/// subtree. With `representatives_per_node == 0` the structure is
/// exported alone and no corpus is needed.
pub fn export_tree(
    tree: &TruncatedTree,
    params: &AutoencoderParams,
    corpus: Option<&Corpus>,
    format: ExportFormat,
    representatives_per_node: usize,
) -> Result<String> {
    let mut extras: BTreeMap<NodeId, Vec<(usize, usize)>> = BTreeMap::new();
    if representatives_per_node > 0 {
        let corpus = corpus.ok_or_else(|| {
            Error::Config("representatives need a corpus to draw elements from".into())
        })?;
        let leaves = tree.leaves();
        let assignments = assign_all(tree, params, corpus)?;
        // cache the posterior means once
        let mut z_means: Vec<Vec<Array1<f64>>> = Vec::with_capacity(corpus.n_sequences());
        for seq in corpus.sequences() {
            let mut row = Vec::with_capacity(seq.elements.len());
            for x in &seq.elements {
                row.push(params.encode(x)?.0);
            }
            z_means.push(row);
        }
        for id in tree.all_nodes() {
            let mu = &tree.node(&id).expect("enumerated").mu;
            let mut candidates: Vec<((usize, usize), f64)> = Vec::new();
            for (m, row) in assignments.iter().enumerate() {
                for (n, &leaf_idx) in row.iter().enumerate() {
                    if id.is_ancestor_or_self(&leaves[leaf_idx]) {
                        let diff = &z_means[m][n] - mu;
                        candidates.push(((m, n), diff.dot(&diff)));
                    }
                }
            }
            candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"));
            candidates.truncate(representatives_per_node);
            extras.insert(id, candidates.into_iter().map(|(e, _)| e).collect());
        }
    }

    match format {
        ExportFormat::Json => {
            let doc = tree.to_json_doc(&extras);
            serde_json::to_string_pretty(&doc)
                .map_err(|e| Error::Config(format!("tree export: {e}")))
        }
        ExportFormat::Dot => {
            let annotations: BTreeMap<NodeId, String> = extras
                .into_iter()
                .filter(|(_, reps)| !reps.is_empty())
                .map(|(id, reps)| {
                    let list = reps
                        .iter()
                        .map(|(m, n)| format!("{m}:{n}"))
                        .collect::<Vec<_>>()
                        .join(" ");
                    (id, format!("reps: {list}"))
                })
                .collect();
            Ok(tree.to_dot(&annotations))
        }
    }
}

/// Standard cluster purity: each cluster votes its majority class; the
/// purity is the fraction of elements covered by those majorities.
pub fn purity(clusters: &[usize], classes: &[i64]) -> f64 {
    assert_eq!(clusters.len(), classes.len());
    let mut counts: BTreeMap<usize, BTreeMap<i64, usize>> = BTreeMap::new();
    for (&k, &c) in clusters.iter().zip(classes) {
        *counts.entry(k).or_default().entry(c).or_insert(0) += 1;
    }
    let covered: usize = counts
        .values()
        .map(|by_class| by_class.values().copied().max().unwrap_or(0))
        .sum();
    covered as f64 / clusters.len() as f64
}
