//! The truncated nCRP tree: labelled nodes with variational Gaussian
//! parameters, deterministic path/edge enumeration, and tree-based
//! stick-breaking mass computation.
//!
//! Nodes do not store their labels. A [`NodeId`] is the sequence of child
//! indices from the root, so labels are consistent with the structure by
//! construction and survive structural edits without a fix-up pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label of a tree node: the root is `1`, the i-th child of node `L` is
/// `L` followed by `i` (1-based). Serializes as the dotted form `1.2.1`
/// so it can key JSON maps.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(Vec<u32>);

impl NodeId {
    pub fn root() -> Self {
        NodeId(vec![1])
    }

    /// Builds a label from its integer sequence, validating the root
    /// prefix and positivity.
    pub fn from_label(label: &[u32]) -> Result<Self> {
        if label.first() != Some(&1) {
            return Err(Error::MalformedTree(format!(
                "node label must start with 1, got {label:?}"
            )));
        }
        if label.iter().any(|&i| i == 0) {
            return Err(Error::MalformedTree(format!(
                "node label indices are 1-based, got {label:?}"
            )));
        }
        Ok(NodeId(label.to_vec()))
    }

    pub fn label(&self) -> &[u32] {
        &self.0
    }

    /// Label of this node's `i`-th child (1-based).
    pub fn child(&self, i: u32) -> NodeId {
        debug_assert!(i >= 1);
        let mut v = self.0.clone();
        v.push(i);
        NodeId(v)
    }

    pub fn parent(&self) -> Option<NodeId> {
        if self.0.len() <= 1 {
            None
        } else {
            Some(NodeId(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn is_root(&self) -> bool {
        self.0.len() == 1
    }

    /// Depth below the root; the root has depth 0.
    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    /// Position among the siblings (1-based); `None` for the root.
    pub fn sibling_index(&self) -> Option<u32> {
        if self.is_root() {
            None
        } else {
            self.0.last().copied()
        }
    }

    /// True when `self` is an ancestor of `other` or equal to it.
    pub fn is_ancestor_or_self(&self, other: &NodeId) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ".")?;
            }
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let label = s
            .split('.')
            .map(|part| {
                part.parse::<u32>()
                    .map_err(|_| Error::MalformedTree(format!("bad node label {s:?}")))
            })
            .collect::<Result<Vec<u32>>>()?;
        NodeId::from_label(&label)
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An edge, identified by its lower (child) endpoint. Never the root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(NodeId);

impl EdgeId {
    pub fn new(child: NodeId) -> Result<Self> {
        if child.is_root() {
            return Err(Error::MalformedTree(
                "an edge cannot end at the root".into(),
            ));
        }
        Ok(EdgeId(child))
    }

    pub fn child(&self) -> &NodeId {
        &self.0
    }

    pub fn parent(&self) -> NodeId {
        self.0.parent().expect("edge child is never the root")
    }

    /// Position of the edge among its siblings (1-based).
    pub fn sibling_index(&self) -> u32 {
        self.0.sibling_index().expect("edge child is never the root")
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for EdgeId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for EdgeId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let id = NodeId::deserialize(de)?;
        EdgeId::new(id).map_err(serde::de::Error::custom)
    }
}

/// One node of the working tree: variational mean and standard deviation
/// of the node parameter, and the ordered children.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub mu: Array1<f64>,
    pub sigma: f64,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn leaf(mu: Array1<f64>, sigma: f64) -> Self {
        TreeNode { mu, sigma, children: Vec::new() }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// The finite working tree plus the model hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncatedTree {
    root: TreeNode,
    dim: usize,
    pub alpha_star: Array1<f64>,
    pub gamma_star: f64,
    pub sigma_n: f64,
    pub sigma_d: f64,
}

impl TruncatedTree {
    pub fn new(
        root: TreeNode,
        alpha_star: Array1<f64>,
        gamma_star: f64,
        sigma_n: f64,
        sigma_d: f64,
    ) -> Result<Self> {
        let dim = alpha_star.len();
        if gamma_star <= 0.0 || sigma_n <= 0.0 || sigma_d <= 0.0 {
            return Err(Error::Config(
                "gamma_star, sigma_n and sigma_d must be positive".into(),
            ));
        }
        let tree = TruncatedTree { root, dim, alpha_star, gamma_star, sigma_n, sigma_d };
        tree.validate()?;
        Ok(tree)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    /// Replaces the root subtree. The caller is responsible for keeping
    /// variational state shapes in sync; used by structure adaptation.
    pub fn set_root(&mut self, root: TreeNode) -> Result<()> {
        self.root = root;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        fn walk(node: &TreeNode, dim: usize, id: &NodeId) -> Result<()> {
            if node.mu.len() != dim {
                return Err(Error::MalformedTree(format!(
                    "node {id} has dimension {} but the tree has {dim}",
                    node.mu.len()
                )));
            }
            if !(node.sigma > 0.0) {
                return Err(Error::MalformedTree(format!(
                    "node {id} has non-positive sigma {}",
                    node.sigma
                )));
            }
            for (k, child) in node.children.iter().enumerate() {
                walk(child, dim, &id.child(k as u32 + 1))?;
            }
            Ok(())
        }
        walk(&self.root, self.dim, &NodeId::root())
    }

    /// Resolves a label to its node by walking child indices.
    pub fn node(&self, id: &NodeId) -> Option<&TreeNode> {
        let mut node = &self.root;
        for &i in &id.label()[1..] {
            node = node.children.get(i as usize - 1)?;
        }
        Some(node)
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut TreeNode> {
        let mut node = &mut self.root;
        for &i in &id.label()[1..] {
            node = node.children.get_mut(i as usize - 1)?;
        }
        Some(node)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.node(id).is_some()
    }

    pub fn is_leaf(&self, id: &NodeId) -> bool {
        self.node(id).map(|n| n.is_leaf()).unwrap_or(false)
    }

    /// Variational mean of the parent; for the root this is α*.
    pub fn parent_mean(&self, id: &NodeId) -> Result<Array1<f64>> {
        match id.parent() {
            None => Ok(self.alpha_star.clone()),
            Some(p) => self
                .node(&p)
                .map(|n| n.mu.clone())
                .ok_or_else(|| Error::InvalidPath(format!("no node {p}"))),
        }
    }

    /// All leaves in depth-first order, children visited in label order.
    /// The position of a leaf in this list is its path index.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        fn walk(node: &TreeNode, id: NodeId, out: &mut Vec<NodeId>) {
            if node.is_leaf() {
                out.push(id);
            } else {
                for (k, child) in node.children.iter().enumerate() {
                    walk(child, id.child(k as u32 + 1), out);
                }
            }
        }
        walk(&self.root, NodeId::root(), &mut out);
        out
    }

    /// Every node in depth-first order, root first.
    pub fn all_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        fn walk(node: &TreeNode, id: NodeId, out: &mut Vec<NodeId>) {
            out.push(id.clone());
            for (k, child) in node.children.iter().enumerate() {
                walk(child, id.child(k as u32 + 1), out);
            }
        }
        walk(&self.root, NodeId::root(), &mut out);
        out
    }

    /// All edges (one per non-root node) in depth-first order.
    pub fn edges(&self) -> Vec<EdgeId> {
        self.all_nodes()
            .into_iter()
            .filter(|n| !n.is_root())
            .map(|n| EdgeId(n))
            .collect()
    }

    /// Internal nodes ordered so every node appears after its children.
    pub fn internal_nodes_bottom_up(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        fn walk(node: &TreeNode, id: NodeId, out: &mut Vec<NodeId>) {
            if node.is_leaf() {
                return;
            }
            for (k, child) in node.children.iter().enumerate() {
                walk(child, id.child(k as u32 + 1), out);
            }
            out.push(id);
        }
        walk(&self.root, NodeId::root(), &mut out);
        out
    }

    pub fn n_leaves(&self) -> usize {
        fn count(node: &TreeNode) -> usize {
            if node.is_leaf() {
                1
            } else {
                node.children.iter().map(count).sum()
            }
        }
        count(&self.root)
    }

    pub fn n_nodes(&self) -> usize {
        fn count(node: &TreeNode) -> usize {
            1 + node.children.iter().map(count).sum::<usize>()
        }
        count(&self.root)
    }

    fn require_leaf(&self, p: &NodeId) -> Result<()> {
        match self.node(p) {
            None => Err(Error::InvalidPath(format!("no node {p} in the tree"))),
            Some(n) if !n.is_leaf() => {
                Err(Error::InvalidPath(format!("{p} is not a leaf")))
            }
            Some(_) => Ok(()),
        }
    }

    /// Edges from the root down to leaf `p`; cardinality equals the depth
    /// of `p`.
    pub fn edges_on_path(&self, p: &NodeId) -> Result<Vec<EdgeId>> {
        self.require_leaf(p)?;
        Ok(path_edges(p))
    }

    /// Edges to the left of the path to leaf `p`: for every
    /// ancestor-or-self of `p` with sibling index `i`, the edges to
    /// siblings with smaller index at the same parent.
    pub fn edges_left_of_path(&self, p: &NodeId) -> Result<Vec<EdgeId>> {
        self.require_leaf(p)?;
        Ok(left_edges(p))
    }
}

/// Edges on the path to `p`, derived from the label alone.
pub(crate) fn path_edges(p: &NodeId) -> Vec<EdgeId> {
    (2..=p.label().len())
        .map(|k| EdgeId(NodeId(p.label()[..k].to_vec())))
        .collect()
}

/// Edges strictly to the left of the path to `p`, derived from the label.
pub(crate) fn left_edges(p: &NodeId) -> Vec<EdgeId> {
    let mut out = Vec::new();
    for k in 2..=p.label().len() {
        let i = p.label()[k - 1];
        for j in 1..i {
            let mut lbl = p.label()[..k - 1].to_vec();
            lbl.push(j);
            out.push(EdgeId(NodeId(lbl)));
        }
    }
    out
}

/// Probability mass the tree-based stick-breaking process assigns to the
/// path ending at `p`, given per-edge stick weights. The root carries
/// mass 1; each edge multiplies by its weight times the leftover of its
/// left siblings. Every edge on and left of the path must be present.
pub fn path_mass(weights: &BTreeMap<EdgeId, f64>, p: &NodeId) -> Result<f64> {
    let mut mass = 1.0;
    for edge in path_edges(p) {
        let i = edge.sibling_index();
        let parent = edge.parent();
        for j in 1..i {
            let sib = EdgeId(parent.child(j));
            let w = weights
                .get(&sib)
                .ok_or_else(|| Error::MissingEdgeWeight(sib.to_string()))?;
            mass *= 1.0 - w;
        }
        let w = weights
            .get(&edge)
            .ok_or_else(|| Error::MissingEdgeWeight(edge.to_string()))?;
        mass *= w;
    }
    Ok(mass)
}

/// Like the raw weight map, but the rightmost retained sibling at every
/// internal node absorbs the residual mass (its effective weight is 1),
/// so the retained paths form a proper distribution.
pub fn absorbing_weights(
    tree: &TruncatedTree,
    weights: &BTreeMap<EdgeId, f64>,
) -> BTreeMap<EdgeId, f64> {
    let mut out = weights.clone();
    fn walk(node: &TreeNode, id: &NodeId, out: &mut BTreeMap<EdgeId, f64>) {
        let n = node.children.len();
        for (k, child) in node.children.iter().enumerate() {
            let cid = id.child(k as u32 + 1);
            if k + 1 == n {
                out.insert(EdgeId(cid.clone()), 1.0);
            }
            walk(child, &cid, out);
        }
    }
    walk(tree.root(), &NodeId::root(), &mut out);
    out
}

// --- external tree document -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    label: Vec<u32>,
    mu: Vec<f64>,
    sigma: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    representatives: Vec<(usize, usize)>,
    #[serde(default)]
    children: Vec<NodeDoc>,
}

impl TruncatedTree {
    /// Serializes the tree as a nested JSON document with explicit labels.
    /// `extras` may attach representative element indices to nodes.
    pub fn to_json_doc(
        &self,
        extras: &BTreeMap<NodeId, Vec<(usize, usize)>>,
    ) -> serde_json::Value {
        fn build(
            node: &TreeNode,
            id: &NodeId,
            extras: &BTreeMap<NodeId, Vec<(usize, usize)>>,
        ) -> NodeDoc {
            NodeDoc {
                label: id.label().to_vec(),
                mu: node.mu.to_vec(),
                sigma: node.sigma,
                representatives: extras.get(id).cloned().unwrap_or_default(),
                children: node
                    .children
                    .iter()
                    .enumerate()
                    .map(|(k, c)| build(c, &id.child(k as u32 + 1), extras))
                    .collect(),
            }
        }
        serde_json::json!({
            "dim": self.dim,
            "alpha_star": self.alpha_star.to_vec(),
            "gamma_star": self.gamma_star,
            "sigma_n": self.sigma_n,
            "sigma_d": self.sigma_d,
            "root": build(&self.root, &NodeId::root(), extras),
        })
    }

    /// Parses the nested JSON document, checking that stored labels agree
    /// with the structural positions.
    pub fn from_json_doc(value: &serde_json::Value) -> Result<Self> {
        let parse = |msg: &str| Error::MalformedTree(msg.to_string());
        let dim = value["dim"].as_u64().ok_or_else(|| parse("missing dim"))? as usize;
        let alpha_star: Vec<f64> = serde_json::from_value(value["alpha_star"].clone())
            .map_err(|e| parse(&format!("alpha_star: {e}")))?;
        let gamma_star = value["gamma_star"].as_f64().ok_or_else(|| parse("missing gamma_star"))?;
        let sigma_n = value["sigma_n"].as_f64().ok_or_else(|| parse("missing sigma_n"))?;
        let sigma_d = value["sigma_d"].as_f64().ok_or_else(|| parse("missing sigma_d"))?;
        let root_doc: NodeDoc = serde_json::from_value(value["root"].clone())
            .map_err(|e| parse(&format!("root: {e}")))?;

        fn build(doc: NodeDoc, expect: &NodeId) -> Result<TreeNode> {
            if doc.label != expect.label() {
                return Err(Error::MalformedTree(format!(
                    "label {:?} stored at position {expect}",
                    doc.label
                )));
            }
            let children = doc
                .children
                .into_iter()
                .enumerate()
                .map(|(k, c)| build(c, &expect.child(k as u32 + 1)))
                .collect::<Result<Vec<_>>>()?;
            Ok(TreeNode { mu: Array1::from_vec(doc.mu), sigma: doc.sigma, children })
        }
        let root = build(root_doc, &NodeId::root())?;
        TruncatedTree::new(root, Array1::from_vec(alpha_star), gamma_star, sigma_n, sigma_d)
            .map_err(|e| match e {
                Error::Config(msg) => Error::MalformedTree(msg),
                other => other,
            })
            .and_then(|t| {
                if t.dim() != dim {
                    Err(Error::MalformedTree(format!(
                        "declared dim {dim} but alpha_star has {}",
                        t.dim()
                    )))
                } else {
                    Ok(t)
                }
            })
    }

    /// DOT (graphviz) rendering. `annotations` adds a second label line
    /// per node, e.g. representative element indices.
    pub fn to_dot(&self, annotations: &BTreeMap<NodeId, String>) -> String {
        let mut out = String::from("digraph tree {\n  node [shape=box];\n");
        for id in self.all_nodes() {
            let mut label = id.to_string();
            if let Some(extra) = annotations.get(&id) {
                label.push_str("\\n");
                label.push_str(extra);
            }
            out.push_str(&format!("  \"{id}\" [label=\"{label}\"];\n"));
        }
        for id in self.all_nodes() {
            if let Some(parent) = id.parent() {
                out.push_str(&format!("  \"{parent}\" -> \"{id}\";\n"));
            }
        }
        out.push_str("}\n");
        out
    }
}
