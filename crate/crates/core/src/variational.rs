//! Mean-field coordinate ascent on the truncated tree, treating latent
//! codes as observations.
//!
//! One sweep refreshes, in order: the per-element path assignments
//! q(c_mn) = Mult(φ_mn), the per-sequence stick posteriors
//! q(v_me) = Beta(γ_me,0, γ_me,1), the leaf Gaussians q(α_p), and the
//! internal-node Gaussians bottom-up. Every update is the exact
//! maximizer of the bound in its coordinate, so [`compute_elbo`] is
//! non-decreasing across sweeps.
//!
//! Variance traces are carried with their dimension factor: wherever an
//! expected squared distance to a node parameter appears, the `D σ_p²`
//! term is used, which is what makes the Gaussian updates and the
//! assignment update maximize the same bound.

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{digamma, ln_beta, log_normalize};
use crate::tree::{left_edges, path_edges, EdgeId, NodeId, TruncatedTree};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Posterior Beta parameters of one stick weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub gamma0: f64,
    pub gamma1: f64,
}

impl BetaParams {
    pub fn prior(gamma_star: f64) -> Self {
        BetaParams { gamma0: 1.0, gamma1: gamma_star }
    }
}

/// Variational state of one sequence: stick posteriors per edge and one
/// assignment vector per element, aligned with the tree's leaf order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceVarState {
    pub beta: BTreeMap<EdgeId, BetaParams>,
    pub phi: Vec<Vec<f64>>,
}

impl SequenceVarState {
    /// Prior sticks and uniform assignments over the current leaves.
    pub fn prior(tree: &TruncatedTree, n_elems: usize) -> Self {
        let beta = tree
            .edges()
            .into_iter()
            .map(|e| (e, BetaParams::prior(tree.gamma_star)))
            .collect();
        let p = tree.n_leaves();
        let phi = vec![vec![1.0 / p as f64; p]; n_elems];
        SequenceVarState { beta, phi }
    }

    fn beta_for(&self, e: &EdgeId) -> Result<&BetaParams> {
        self.beta
            .get(e)
            .ok_or_else(|| Error::InvalidPath(format!("no Beta parameters for edge {e}")))
    }
}

/// Latent codes consumed by inference. `z` is the observation the
/// updates use; the trainer refreshes it with the encoder posterior
/// means, so `z_mean` and `z` normally coincide.
#[derive(Debug, Clone)]
pub struct LatentTable {
    pub z: Vec<Vec<Array1<f64>>>,
    pub z_mean: Vec<Vec<Array1<f64>>>,
    pub z_stdev: Vec<Vec<Array1<f64>>>,
}

impl LatentTable {
    /// Treats the given codes directly as observations.
    pub fn from_codes(z: Vec<Vec<Array1<f64>>>) -> Self {
        let z_stdev = z
            .iter()
            .map(|s| s.iter().map(|v| Array1::ones(v.len())).collect())
            .collect();
        LatentTable { z_mean: z.clone(), z_stdev, z }
    }
}

/// Per-leaf edge memberships, precomputed once per sweep.
pub struct PathTables {
    pub leaves: Vec<NodeId>,
    pub on: Vec<Vec<EdgeId>>,
    pub left: Vec<Vec<EdgeId>>,
}

impl PathTables {
    pub fn new(tree: &TruncatedTree) -> Self {
        let leaves = tree.leaves();
        let on = leaves.iter().map(path_edges).collect();
        let left = leaves.iter().map(left_edges).collect();
        PathTables { leaves, on, left }
    }
}

/// Leaf Gaussian update: precision gains the assigned mass over σ_D²,
/// the mean is the precision-weighted blend of the parent mean and the
/// assigned codes. Zero assigned mass recovers the prior around the
/// parent.
pub fn update_leaf_node(
    tree: &TruncatedTree,
    states: &[SequenceVarState],
    latents: &LatentTable,
    p: &NodeId,
) -> Result<(Array1<f64>, f64)> {
    let leaves = tree.leaves();
    let idx = leaves
        .iter()
        .position(|l| l == p)
        .ok_or_else(|| Error::InvalidPath(format!("{p} is not a leaf")))?;
    update_leaf_node_at(tree, states, latents, p, idx)
}

fn update_leaf_node_at(
    tree: &TruncatedTree,
    states: &[SequenceVarState],
    latents: &LatentTable,
    p: &NodeId,
    idx: usize,
) -> Result<(Array1<f64>, f64)> {
    let mut mass = 0.0;
    let mut weighted = Array1::<f64>::zeros(tree.dim());
    for (m, state) in states.iter().enumerate() {
        for (n, phi) in state.phi.iter().enumerate() {
            let w = phi[idx];
            if w != 0.0 {
                mass += w;
                weighted.scaled_add(w, &latents.z[m][n]);
            }
        }
    }
    let sn2 = tree.sigma_n * tree.sigma_n;
    let sd2 = tree.sigma_d * tree.sigma_d;
    let precision = 1.0 / sn2 + mass / sd2;
    let sigma2 = 1.0 / precision;
    let parent = tree.parent_mean(p)?;
    let mu = sigma2 * (parent / sn2 + weighted / sd2);
    Ok((mu, sigma2.sqrt()))
}

/// Internal-node Gaussian update: the simple average of the parent and
/// child means, with precision (1 + |ch|)/σ_N². Carries no data term.
pub fn update_internal_node(tree: &TruncatedTree, p: &NodeId) -> Result<(Array1<f64>, f64)> {
    let node = tree
        .node(p)
        .ok_or_else(|| Error::InvalidPath(format!("no node {p}")))?;
    if node.is_leaf() {
        return Err(Error::InvalidPath(format!("{p} is a leaf, not internal")));
    }
    let sn2 = tree.sigma_n * tree.sigma_n;
    let k = node.children.len() as f64;
    let sigma2 = sn2 / (1.0 + k);
    let mut sum = tree.parent_mean(p)?;
    for child in &node.children {
        sum = sum + &child.mu;
    }
    let mu = sigma2 * sum / sn2;
    Ok((mu, sigma2.sqrt()))
}

/// Stick posterior update for one sequence and edge: the on-path mass
/// feeds γ0, the mass of paths to the right feeds γ1.
pub fn update_edge_beta(
    state: &SequenceVarState,
    tree: &TruncatedTree,
    e: &EdgeId,
    gamma_star: f64,
) -> Result<BetaParams> {
    if !tree.contains(e.child()) {
        return Err(Error::InvalidPath(format!("no edge {e} in the tree")));
    }
    let tables = PathTables::new(tree);
    Ok(update_edge_beta_with_tables(state, &tables, e, gamma_star))
}

fn update_edge_beta_with_tables(
    state: &SequenceVarState,
    tables: &PathTables,
    e: &EdgeId,
    gamma_star: f64,
) -> BetaParams {
    let mut on_mass = 0.0;
    let mut left_mass = 0.0;
    for (idx, _) in tables.leaves.iter().enumerate() {
        let on = tables.on[idx].contains(e);
        let left = tables.left[idx].contains(e);
        if !on && !left {
            continue;
        }
        let mass: f64 = state.phi.iter().map(|phi| phi[idx]).sum();
        if on {
            on_mass += mass;
        } else {
            left_mass += mass;
        }
    }
    BetaParams { gamma0: 1.0 + on_mass, gamma1: gamma_star + left_mass }
}

/// Assignment update for element (m, n): expected log stick mass of each
/// retained path plus the expected emission log-density, normalized in
/// log space.
pub fn update_path_assignment(
    state: &SequenceVarState,
    tree: &TruncatedTree,
    latents: &LatentTable,
    m: usize,
    n: usize,
) -> Result<Vec<f64>> {
    let tables = PathTables::new(tree);
    update_path_assignment_with_tables(state, tree, &tables, latents, m, n)
}

fn update_path_assignment_with_tables(
    state: &SequenceVarState,
    tree: &TruncatedTree,
    tables: &PathTables,
    latents: &LatentTable,
    m: usize,
    n: usize,
) -> Result<Vec<f64>> {
    let z = &latents.z[m][n];
    let sd2 = tree.sigma_d * tree.sigma_d;
    let dim = tree.dim() as f64;
    let mut log_w = Vec::with_capacity(tables.leaves.len());
    for (idx, leaf) in tables.leaves.iter().enumerate() {
        let mut score = 0.0;
        for e in &tables.on[idx] {
            let b = state.beta_for(e)?;
            score += digamma(b.gamma0) - digamma(b.gamma0 + b.gamma1);
        }
        for e in &tables.left[idx] {
            let b = state.beta_for(e)?;
            score += digamma(b.gamma1) - digamma(b.gamma0 + b.gamma1);
        }
        let node = tree.node(leaf).expect("leaf exists");
        let diff = z - &node.mu;
        score -= (diff.dot(&diff) + dim * node.sigma * node.sigma) / (2.0 * sd2);
        log_w.push(score);
    }
    if !log_normalize(&mut log_w) {
        return Err(Error::Numerical(format!(
            "path assignment for element ({m},{n}) could not be normalized"
        )));
    }
    Ok(log_w)
}

/// The evidence lower bound split into its seven summands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// E[log p(α_p | α_par(p), σ_N)] over all nodes.
    pub node_prior: f64,
    /// E[log p(v_me | γ*)] over sequences and edges.
    pub stick_prior: f64,
    /// E[log p(c_mn | V_m)] over elements.
    pub path_prior: f64,
    /// E[log p(z_mn | α, c_mn, σ_D)] over elements.
    pub emission: f64,
    /// Entropy of the node Gaussians.
    pub node_entropy: f64,
    /// Entropy of the stick Betas.
    pub stick_entropy: f64,
    /// Entropy of the assignment multinomials.
    pub path_entropy: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.node_prior
            + self.stick_prior
            + self.path_prior
            + self.emission
            + self.node_entropy
            + self.stick_entropy
            + self.path_entropy
    }
}

/// Evaluates the bound E_q[log p(W, X | Θ)] − E_q[log q(W)] for the
/// truncated model.
pub fn compute_elbo_terms(
    tree: &TruncatedTree,
    states: &[SequenceVarState],
    latents: &LatentTable,
) -> Result<ElboTerms> {
    let dim = tree.dim() as f64;
    let sn2 = tree.sigma_n * tree.sigma_n;
    let sd2 = tree.sigma_d * tree.sigma_d;
    let tables = PathTables::new(tree);

    let mut node_prior = 0.0;
    let mut node_entropy = 0.0;
    for id in tree.all_nodes() {
        let node = tree.node(&id).expect("enumerated");
        let (parent_mu, parent_sigma) = match id.parent() {
            None => (tree.alpha_star.clone(), 0.0),
            Some(pid) => {
                let p = tree.node(&pid).expect("parent exists");
                (p.mu.clone(), p.sigma)
            }
        };
        let diff = &node.mu - &parent_mu;
        let spread = dim * (node.sigma * node.sigma + parent_sigma * parent_sigma);
        node_prior +=
            -0.5 * dim * (LN_2PI + sn2.ln()) - (diff.dot(&diff) + spread) / (2.0 * sn2);
        node_entropy += 0.5 * dim * (LN_2PI + 1.0 + (node.sigma * node.sigma).ln());
    }

    let mut stick_prior = 0.0;
    let mut stick_entropy = 0.0;
    for state in states {
        for e in tree.edges() {
            let b = state.beta_for(&e)?;
            let psi_sum = digamma(b.gamma0 + b.gamma1);
            stick_prior +=
                tree.gamma_star.ln() + (tree.gamma_star - 1.0) * (digamma(b.gamma1) - psi_sum);
            stick_entropy += ln_beta(b.gamma0, b.gamma1)
                - (b.gamma0 - 1.0) * digamma(b.gamma0)
                - (b.gamma1 - 1.0) * digamma(b.gamma1)
                + (b.gamma0 + b.gamma1 - 2.0) * psi_sum;
        }
    }

    // Expected log stick mass per (sequence, path).
    let mut path_prior = 0.0;
    let mut emission = 0.0;
    let mut path_entropy = 0.0;
    for (m, state) in states.iter().enumerate() {
        let mut scores = Vec::with_capacity(tables.leaves.len());
        for idx in 0..tables.leaves.len() {
            let mut s = 0.0;
            for e in &tables.on[idx] {
                let b = state.beta_for(e)?;
                s += digamma(b.gamma0) - digamma(b.gamma0 + b.gamma1);
            }
            for e in &tables.left[idx] {
                let b = state.beta_for(e)?;
                s += digamma(b.gamma1) - digamma(b.gamma0 + b.gamma1);
            }
            scores.push(s);
        }
        for (n, phi) in state.phi.iter().enumerate() {
            let z = &latents.z[m][n];
            for (idx, &w) in phi.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let node = tree.node(&tables.leaves[idx]).expect("leaf exists");
                let diff = z - &node.mu;
                path_prior += w * scores[idx];
                emission += w
                    * (-0.5 * dim * (LN_2PI + sd2.ln())
                        - (diff.dot(&diff) + dim * node.sigma * node.sigma) / (2.0 * sd2));
                path_entropy -= w * w.ln();
            }
        }
    }

    Ok(ElboTerms {
        node_prior,
        stick_prior,
        path_prior,
        emission,
        node_entropy,
        stick_entropy,
        path_entropy,
    })
}

pub fn compute_elbo(
    tree: &TruncatedTree,
    states: &[SequenceVarState],
    latents: &LatentTable,
) -> Result<f64> {
    Ok(compute_elbo_terms(tree, states, latents)?.total())
}

/// One full coordinate-ascent pass: assignments, then sticks, then leaf
/// Gaussians, then internal Gaussians bottom-up.
pub fn vi_sweep(
    tree: &mut TruncatedTree,
    states: &mut [SequenceVarState],
    latents: &LatentTable,
) -> Result<()> {
    let tables = PathTables::new(tree);

    for (m, state) in states.iter_mut().enumerate() {
        for n in 0..state.phi.len() {
            let phi = update_path_assignment_with_tables(state, tree, &tables, latents, m, n)?;
            state.phi[n] = phi;
        }
    }

    let edges = tree.edges();
    for state in states.iter_mut() {
        for e in &edges {
            let b = update_edge_beta_with_tables(state, &tables, e, tree.gamma_star);
            state.beta.insert(e.clone(), b);
        }
    }

    for (idx, leaf) in tables.leaves.iter().enumerate() {
        let (mu, sigma) = update_leaf_node_at(tree, states, latents, leaf, idx)?;
        let node = tree.node_mut(leaf).expect("leaf exists");
        node.mu = mu;
        node.sigma = sigma;
    }

    for id in tree.internal_nodes_bottom_up() {
        let (mu, sigma) = update_internal_node(tree, &id)?;
        let node = tree.node_mut(&id).expect("internal exists");
        node.mu = mu;
        node.sigma = sigma;
    }

    Ok(())
}
