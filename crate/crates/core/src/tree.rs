//! CART classifier for the switching condition `ĝ(x_k, u_k)`.
//!
//! Features are `(φ1, ω1, ω2, M)`. Splits minimise the weighted Gini impurity
//! of the two children over all midpoints between consecutive distinct
//! feature values; the left child receives `ξ[l] < t`.

use serde::{Deserialize, Serialize};

use crate::pendulum::{Sample, State};
use crate::{Class, Error, Result};

pub const N_FEATURES: usize = 4;
pub const DEFAULT_MAX_DEPTH: usize = 8;
pub const DEFAULT_MIN_SAMPLES_LEAF: usize = 20;

/// `(φ1, ω1, ω2, M)`.
pub type SplitFeature = [f64; N_FEATURES];

pub fn split_feature(x: &State, u: f64) -> SplitFeature {
    [x.phi1, x.omega1, x.omega2, u]
}

pub fn sample_feature(s: &Sample) -> SplitFeature {
    split_feature(&s.state, s.input)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
}

impl Split {
    #[inline]
    pub fn goes_left(&self, f: &SplitFeature) -> bool {
        f[self.feature] < self.threshold
    }
}

/// Tree node; children are indices into [`DecisionTree::nodes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize, counts: [usize; 2] },
    Leaf { class: Class, counts: [usize; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Pre-order node array; the root is `nodes[0]`.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    /// A single leaf predicting `class` everywhere.
    pub fn constant(class: Class) -> DecisionTree {
        DecisionTree {
            max_depth: 0,
            min_samples_leaf: 1,
            nodes: vec![Node::Leaf { class, counts: [0, 0] }],
        }
    }

    /// Checks that child links point forward and in range, so traversal terminates.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Dimension("tree has no nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Node::Split { feature, threshold, left, right, .. } = n {
                if *feature >= N_FEATURES || !threshold.is_finite() {
                    return Err(Error::Dimension(format!("node {i}: invalid split")));
                }
                for c in [left, right] {
                    if *c <= i || *c >= self.nodes.len() {
                        return Err(Error::Dimension(format!("node {i}: bad child index {c}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// `p1(1−p1) + p2(1−p2)`.
pub fn gini(counts: [usize; 2]) -> Result<f64> {
    let n = counts[0] + counts[1];
    if n == 0 {
        return Err(Error::EmptyNode);
    }
    Ok(gini_unchecked(counts))
}

#[inline]
fn gini_unchecked(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    let p1 = counts[0] as f64 / n;
    let p2 = counts[1] as f64 / n;
    p1 * (1.0 - p1) + p2 * (1.0 - p2)
}

/// Weighted child impurity from per-child class counts.
#[inline]
fn weighted_gini(left: [usize; 2], right: [usize; 2]) -> f64 {
    let nl = (left[0] + left[1]) as f64;
    let nr = (right[0] + right[1]) as f64;
    let n = nl + nr;
    nl / n * gini_unchecked(left) + nr / n * gini_unchecked(right)
}

fn class_counts<'a>(labels: impl Iterator<Item = &'a Class>) -> [usize; 2] {
    let mut c = [0; 2];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}

/// `(N⁺/N)·H(Q⁺) + (N⁻/N)·H(Q⁻)` for the children induced by `s`.
pub fn split_quality(node: &[(SplitFeature, Class)], s: &Split) -> Result<f64> {
    if s.feature >= N_FEATURES {
        return Err(Error::Dimension(format!("feature index {}", s.feature)));
    }
    let mut left = [0; 2];
    let mut right = [0; 2];
    for (f, c) in node {
        if s.goes_left(f) {
            left[c.index()] += 1;
        } else {
            right[c.index()] += 1;
        }
    }
    if left[0] + left[1] == 0 || right[0] + right[1] == 0 {
        return Err(Error::DegenerateSplit);
    }
    Ok(weighted_gini(left, right))
}

/// Threshold strictly above `a` and at most `b`, so that `a` goes left and `b` right.
#[inline]
fn midpoint(a: f64, b: f64) -> f64 {
    let t = a + (b - a) * 0.5;
    if t > a {
        t
    } else {
        b
    }
}

/// `n/2 ·` weighted child impurity as the exact fraction
/// `(l0·l1·nr + r0·r1·nl) / (nl·nr)`, so candidate splits compare without rounding.
#[inline]
fn impurity_fraction(left: [usize; 2], right: [usize; 2]) -> (u128, u128) {
    let (l0, l1, r0, r1) = (left[0] as u128, left[1] as u128, right[0] as u128, right[1] as u128);
    let (nl, nr) = (l0 + l1, r0 + r1);
    (l0 * l1 * nr + r0 * r1 * nl, nl * nr)
}

#[inline]
fn less(a: (u128, u128), b: (u128, u128)) -> bool {
    a.0 * b.1 < b.0 * a.1
}

/// Exact search over the samples `idx` of `node`, admitting only splits that
/// leave at least `min_leaf` samples on each side. Returns the split and its
/// weighted impurity when it is strictly below the node's impurity.
fn search(node: &[(SplitFeature, Class)], idx: &[usize], min_leaf: usize) -> Option<(Split, f64)> {
    let n = idx.len();
    let min_leaf = min_leaf.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let total = class_counts(idx.iter().map(|&i| &node[i].1));
    if total[0] == 0 || total[1] == 0 {
        return None;
    }
    let parent = (total[0] as u128 * total[1] as u128, n as u128);
    let mut best: Option<(Split, [usize; 2], (u128, u128))> = None;
    let mut order = idx.to_vec();
    for feature in 0..N_FEATURES {
        order.sort_by(|&a, &b| node[a].0[feature].total_cmp(&node[b].0[feature]));
        let mut left = [0usize; 2];
        for k in 0..n - 1 {
            left[node[order[k]].1.index()] += 1;
            let a = node[order[k]].0[feature];
            let b = node[order[k + 1]].0[feature];
            if !(a < b) {
                continue;
            }
            let nl = k + 1;
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let g = impurity_fraction(left, right);
            if best.as_ref().is_none_or(|(_, _, bg)| less(g, *bg)) {
                best = Some((Split { feature, threshold: midpoint(a, b) }, left, g));
            }
        }
    }
    best.filter(|(_, _, g)| less(*g, parent)).map(|(s, left, _)| {
        let right = [total[0] - left[0], total[1] - left[1]];
        (s, weighted_gini(left, right))
    })
}

/// Impurity-minimising split of `node`, or `None` if no split reduces impurity.
///
/// Ties are resolved towards the lower feature index, then the lower threshold.
pub fn best_split(node: &[(SplitFeature, Class)]) -> Option<Split> {
    let idx: Vec<usize> = (0..node.len()).collect();
    search(node, &idx, 1).map(|(s, _)| s)
}

fn majority(counts: [usize; 2]) -> Class {
    if counts[0] > counts[1] {
        Class::C1
    } else {
        Class::C2
    }
}

/// Recursive CART growth.
///
/// A node becomes a leaf when it is pure, at `max_depth`, or when no split
/// with at least `min_samples_leaf` samples per child reduces impurity.
pub fn fit_tree(data: &[(SplitFeature, Class)], max_depth: usize, min_samples_leaf: usize) -> DecisionTree {
    let mut tree = DecisionTree { max_depth, min_samples_leaf, nodes: Vec::new() };
    let idx: Vec<usize> = (0..data.len()).collect();
    grow(data, idx, 0, &mut tree);
    tree
}

fn grow(data: &[(SplitFeature, Class)], idx: Vec<usize>, depth: usize, tree: &mut DecisionTree) -> usize {
    let counts = class_counts(idx.iter().map(|&i| &data[i].1));
    let me = tree.nodes.len();
    tree.nodes.push(Node::Leaf { class: majority(counts), counts });
    if depth >= tree.max_depth {
        return me;
    }
    let Some((split, _)) = search(data, &idx, tree.min_samples_leaf) else {
        return me;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| split.goes_left(&data[i].0));
    let left = grow(data, l, depth + 1, tree);
    let right = grow(data, r, depth + 1, tree);
    tree.nodes[me] = Node::Split { feature: split.feature, threshold: split.threshold, left, right, counts };
    me
}

/// Root-to-leaf traversal.
pub fn predict(t: &DecisionTree, f: &SplitFeature) -> Class {
    let mut i = 0;
    loop {
        match &t.nodes[i] {
            Node::Leaf { class, .. } => return *class,
            Node::Split { feature, threshold, left, right, .. } => {
                i = if f[*feature] < *threshold { *left } else { *right };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labelled(points: &[(f64, Class)]) -> Vec<(SplitFeature, Class)> {
        points.iter().map(|&(v, c)| ([v, 0.0, 0.0, 0.0], c)).collect()
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini([10, 0]).unwrap(), 0.0);
        assert_eq!(gini([5, 5]).unwrap(), 0.5);
        assert_relative_eq!(gini([3, 7]).unwrap(), 2.0 * 0.3 * 0.7, epsilon = 1e-15);
        assert_eq!(gini([0, 0]), Err(Error::EmptyNode));
    }

    #[test]
    fn split_quality_cases() {
        use Class::*;
        let d = labelled(&[(1.0, C1), (2.0, C1), (3.0, C2), (4.0, C2)]);
        assert_eq!(split_quality(&d, &Split { feature: 0, threshold: 2.5 }).unwrap(), 0.0);
        assert_eq!(
            split_quality(&d, &Split { feature: 0, threshold: 10.0 }),
            Err(Error::DegenerateSplit)
        );
        // 8 samples, split at 4.5: left {C1,C1,C2,C1}, right {C2,C2,C1,C2}.
        let d = labelled(&[
            (1.0, C1), (2.0, C1), (3.0, C2), (4.0, C1), (5.0, C2), (6.0, C2), (7.0, C1), (8.0, C2),
        ]);
        let g = split_quality(&d, &Split { feature: 0, threshold: 4.5 }).unwrap();
        assert_relative_eq!(g, 0.5 * 0.375 + 0.5 * 0.375, epsilon = 1e-15);
    }

    #[test]
    fn best_split_obvious_and_pure() {
        use Class::*;
        let d = labelled(&[(1.0, C1), (2.0, C1), (3.0, C2), (4.0, C2)]);
        assert_eq!(best_split(&d), Some(Split { feature: 0, threshold: 2.5 }));
        let pure = labelled(&[(1.0, C2), (2.0, C2), (3.0, C2)]);
        assert_eq!(best_split(&pure), None);
    }

    #[test]
    fn midpoint_of_adjacent_floats_separates() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let t = midpoint(a, b);
        assert!(a < t && !(b < t));
    }

    #[test]
    fn single_sample_tree() {
        let t = fit_tree(&[([0.0; 4], Class::C1)], 8, 20);
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(predict(&t, &[5.0, 1.0, 2.0, 3.0]), Class::C1);
    }

    #[test]
    fn separable_1d_gives_stump() {
        let d: Vec<_> = (0..100)
            .map(|i| ([i as f64, 0.0, 0.0, 0.0], if i < 37 { Class::C1 } else { Class::C2 }))
            .collect();
        let t = fit_tree(&d, 8, 1);
        assert_eq!(t.depth(), 1);
        assert!(d.iter().all(|(f, c)| predict(&t, f) == *c));
    }

    #[test]
    fn stump_rule_and_threshold_semantics() {
        let t = DecisionTree {
            max_depth: 1,
            min_samples_leaf: 1,
            nodes: vec![
                Node::Split { feature: 2, threshold: 0.5, left: 1, right: 2, counts: [1, 1] },
                Node::Leaf { class: Class::C1, counts: [1, 0] },
                Node::Leaf { class: Class::C2, counts: [0, 1] },
            ],
        };
        t.validate().unwrap();
        assert_eq!(predict(&t, &[0.0, 0.0, 0.3, 0.0]), Class::C1);
        assert_eq!(predict(&t, &[0.0, 0.0, 0.5, 0.0]), Class::C2);
        assert_eq!(predict(&DecisionTree::constant(Class::C2), &[1.0; 4]), Class::C2);
    }

    #[test]
    fn majority_tie_goes_to_c2() {
        let d = vec![([0.0; 4], Class::C1), ([0.0; 4], Class::C2)];
        let t = fit_tree(&d, 8, 1);
        assert_eq!(t.nodes, vec![Node::Leaf { class: Class::C2, counts: [1, 1] }]);
    }

    #[test]
    fn min_samples_leaf_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<_> = (0..500)
            .map(|_| {
                let f: SplitFeature = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                (f, if f[0] * f[1] > 0.0 { Class::C1 } else { Class::C2 })
            })
            .collect();
        let t = fit_tree(&d, 20, 25);
        for n in &t.nodes {
            if let Node::Leaf { counts, .. } = n {
                assert!(counts[0] + counts[1] >= 25);
            }
        }
        assert!(t.depth() <= 20);
    }

    #[test]
    fn corrupt_tree_is_rejected() {
        let t = DecisionTree {
            max_depth: 1,
            min_samples_leaf: 1,
            nodes: vec![Node::Split { feature: 0, threshold: 0.0, left: 0, right: 1, counts: [0, 0] }],
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn json_schema() {
        let d = labelled(&[(1.0, Class::C1), (2.0, Class::C2)]);
        let t = fit_tree(&d, 8, 1);
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        assert_eq!(v["nodes"][0]["kind"], "split");
        assert_eq!(v["nodes"][1]["kind"], "leaf");
        assert_eq!(v["nodes"][1]["class"], "C1");
        let back: DecisionTree = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }

    /// Brute force: every feature × every midpoint, counts recomputed per candidate.
    pub(crate) fn exhaustive(node: &[(SplitFeature, Class)]) -> Option<Split> {
        let total = class_counts(node.iter().map(|(_, c)| c));
        if total[0] == 0 || total[1] == 0 {
            return None;
        }
        let parent = {
            let n = node.len() as f64;
            let (p1, p2) = (total[0] as f64 / n, total[1] as f64 / n);
            p1 * (1.0 - p1) + p2 * (1.0 - p2)
        };
        let mut best: Option<(Split, f64)> = None;
        for feature in 0..N_FEATURES {
            let mut values: Vec<f64> = node.iter().map(|(f, _)| f[feature]).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for w in values.windows(2) {
                let s = Split { feature, threshold: midpoint(w[0], w[1]) };
                let g = split_quality(node, &s).unwrap();
                if best.as_ref().is_none_or(|(_, bg)| g < *bg) {
                    best = Some((s, g));
                }
            }
        }
        best.filter(|(_, g)| *g < parent).map(|(s, _)| s)
    }

    fn partition(node: &[(SplitFeature, Class)], s: &Split) -> Vec<bool> {
        node.iter().map(|(f, _)| s.goes_left(f)).collect()
    }

    #[test]
    fn twelve_random_samples_match_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let d: Vec<_> = (0..12)
                .map(|_| {
                    let f: SplitFeature = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    (f, if rng.random::<bool>() { Class::C1 } else { Class::C2 })
                })
                .collect();
            assert_eq!(best_split(&d), exhaustive(&d));
        }
    }

    proptest! {
        #[test]
        fn split_optimality(seed in 0u64..10_000, n in 2usize..200, grid in 0u32..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse grids create many duplicate values and tied impurities.
            let draw = |r: &mut ChaCha8Rng| -> f64 {
                let v = r.random_range(-1.0..1.0);
                if grid == 0 { v } else { (v * 4.0 * grid as f64).round() }
            };
            let d: Vec<_> = (0..n)
                .map(|_| {
                    let f: SplitFeature = std::array::from_fn(|_| draw(&mut rng));
                    (f, if rng.random_range(0.0..1.0) < 0.3 + 0.4 * (f[0] > 0.0) as u8 as f64 { Class::C1 } else { Class::C2 })
                })
                .collect();
            let a = best_split(&d);
            let b = exhaustive(&d);
            prop_assert_eq!(a.map(|s| s.feature), b.map(|s| s.feature));
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert_eq!(partition(&d, &a), partition(&d, &b));
                let g = split_quality(&d, &a).unwrap();
                let parent = gini(class_counts(d.iter().map(|(_, c)| c))).unwrap();
                prop_assert!(g <= parent + 1e-12);
            }
        }

        #[test]
        fn impurity_bounds(n1 in 0usize..1000, n2 in 0usize..1000) {
            if n1 + n2 > 0 {
                let g = gini([n1, n2]).unwrap();
                prop_assert!((0.0..=0.5).contains(&g));
                prop_assert_eq!(g == 0.0, n1 == 0 || n2 == 0);
            }
        }

        #[test]
        fn fully_grown_tree_interpolates(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<_> = (0..60)
                .map(|_| {
                    let f: SplitFeature = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    (f, if rng.random::<bool>() { Class::C1 } else { Class::C2 })
                })
                .collect();
            let t = fit_tree(&d, usize::MAX, 1);
            t.validate().unwrap();
            for (f, c) in &d {
                prop_assert_eq!(predict(&t, f), *c);
            }
        }

        #[test]
        fn internal_nodes_do_not_increase_impurity(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<_> = (0..300)
                .map(|_| {
                    let f: SplitFeature = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    let p = if f[0] + 0.5 * f[2] > 0.1 { 0.9 } else { 0.15 };
                    (f, if rng.random_range(0.0..1.0) < p { Class::C1 } else { Class::C2 })
                })
                .collect();
            let t = fit_tree(&d, 6, 5);
            for n in &t.nodes {
                if let Node::Split { left, right, counts, .. } = n {
                    let c = |i: &usize| match &t.nodes[*i] {
                        Node::Split { counts, .. } | Node::Leaf { counts, .. } => *counts,
                    };
                    let g = weighted_gini(c(left), c(right));
                    prop_assert!(g <= gini(*counts).unwrap() + 1e-12);
                }
            }
        }
    }
}
