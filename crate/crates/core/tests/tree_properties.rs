//! Property tests for the stick-breaking tree: mass conservation under
//! the absorbing-rightmost convention, sub-unit mass for arbitrary
//! weights, on/left disjointness, and stable path enumeration.

use std::collections::BTreeMap;

use ndarray::Array1;
use proptest::prelude::*;

use ncrpvae::tree::{absorbing_weights, path_mass, TreeNode, TruncatedTree};

#[derive(Debug, Clone)]
struct Shape(Vec<Shape>);

fn arb_shape() -> impl Strategy<Value = Shape> {
    let leaf = Just(Shape(Vec::new()));
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop::collection::vec(inner, 1..4).prop_map(Shape)
    })
}

fn build(shape: &Shape) -> TreeNode {
    TreeNode {
        mu: Array1::zeros(1),
        sigma: 1.0,
        children: shape.0.iter().map(build).collect(),
    }
}

fn tree_of(shape: &Shape) -> TruncatedTree {
    TruncatedTree::new(build(shape), Array1::zeros(1), 1.0, 1.0, 1.0).expect("valid tree")
}

proptest! {
    #[test]
    fn absorbing_masses_sum_to_one(shape in arb_shape(), raw in prop::collection::vec(0.0f64..1.0, 64)) {
        let tree = tree_of(&shape);
        let mut weights = BTreeMap::new();
        for (i, e) in tree.edges().into_iter().enumerate() {
            weights.insert(e, raw[i % raw.len()]);
        }
        let eff = absorbing_weights(&tree, &weights);
        let total: f64 = tree
            .leaves()
            .iter()
            .map(|p| path_mass(&eff, p).expect("complete weights"))
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "total mass {total}");
    }

    #[test]
    fn arbitrary_masses_never_exceed_one(shape in arb_shape(), raw in prop::collection::vec(0.0f64..1.0, 64)) {
        let tree = tree_of(&shape);
        let mut weights = BTreeMap::new();
        for (i, e) in tree.edges().into_iter().enumerate() {
            weights.insert(e, raw[i % raw.len()]);
        }
        let total: f64 = tree
            .leaves()
            .iter()
            .map(|p| path_mass(&weights, p).expect("complete weights"))
            .sum();
        prop_assert!(total <= 1.0 + 1e-12, "total mass {total}");
        for p in tree.leaves() {
            let mass = path_mass(&weights, &p).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&mass));
        }
    }

    #[test]
    fn on_and_left_edges_disjoint(shape in arb_shape()) {
        let tree = tree_of(&shape);
        for leaf in tree.leaves() {
            let on = tree.edges_on_path(&leaf).unwrap();
            let left = tree.edges_left_of_path(&leaf).unwrap();
            prop_assert_eq!(on.len(), leaf.depth());
            for e in &on {
                prop_assert!(!left.contains(e), "edge {} both on and left of {}", e, leaf);
            }
        }
    }

    #[test]
    fn enumeration_is_stable(shape in arb_shape()) {
        // identical shapes produce identical orderings, and the order is
        // strictly increasing in label order
        let a = tree_of(&shape);
        let b = tree_of(&shape);
        let la = a.leaves();
        prop_assert_eq!(&la, &b.leaves());
        for w in la.windows(2) {
            prop_assert!(w[0] < w[1], "leaves out of label order: {} !< {}", w[0], w[1]);
        }
    }
}
