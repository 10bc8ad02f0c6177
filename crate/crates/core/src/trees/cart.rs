//! Weighted regression trees grown best-first on variance reduction.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// `x[feature] <= threshold` goes left. `gain` is the weighted
    /// variance reduction achieved by this split.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        value: f64,
    },
}

/// A fitted tree; `nodes[0]` is the root and nodes are stored in pre-order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    /// Builds a tree from a pre-order node list, checking that every child
    /// index points forward and each node is referenced exactly once.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid("tree has no nodes"));
        }
        let mut parents = vec![0usize; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if let Node::Split { left, right, .. } = *n {
                for c in [left, right] {
                    if c <= i || c >= nodes.len() {
                        return Err(Error::invalid(format!("node {i} has invalid child {c}")));
                    }
                    parents[c] += 1;
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(Error::invalid("tree nodes do not form a single tree"));
        }
        Ok(Tree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if row[feature] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub(crate) fn add_gains(&self, acc: &mut [f64]) {
        for n in &self.nodes {
            if let Node::Split { feature, gain, .. } = *n {
                acc[feature] += gain;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Leaf budget for best-first growth; `None` grows until no split helps.
    pub max_leaves: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features drawn per node; `None` considers all of them.
    pub max_features: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_leaves: None,
            min_samples_leaf: 1,
            max_features: None,
        }
    }
}

/// Best split found for a set of rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Weighted sum of squares around the mean, `Σw·y² − (Σw·y)²/Σw`, written
/// as the part that does not cancel in a gain: `−(Σw·y)²/Σw`.
#[inline]
fn neg_ss(swy: f64, sw: f64) -> f64 {
    -(swy * swy) / sw
}

/// Scans every threshold of `features` over `rows` and returns the one with
/// the largest gain. Ties keep the lowest feature, then the lowest threshold.
pub fn best_split(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    rows: &[usize],
    features: &[usize],
    min_samples_leaf: usize,
) -> Option<SplitCandidate> {
    let min_leaf = min_samples_leaf.max(1);
    if rows.len() < 2 * min_leaf {
        return None;
    }
    let first = y[rows[0]];
    if rows.iter().all(|&r| y[r] == first) {
        return None;
    }
    let (sw, swy, swy2) = rows.iter().fold((0.0, 0.0, 0.0), |(a, b, c), &r| {
        (a + w[r], b + w[r] * y[r], c + w[r] * y[r] * y[r])
    });
    let parent = neg_ss(swy, sw);
    // gains closer than this are ties
    let eps = 1e-12 * swy2.abs().max(f64::MIN_POSITIVE);

    let mut best: Option<SplitCandidate> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for &f in features {
        order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)).then(a.cmp(&b)));
        let (mut lw, mut lwy) = (0.0, 0.0);
        for i in 0..order.len() - 1 {
            let r = order[i];
            lw += w[r];
            lwy += w[r] * y[r];
            let lo = x.get(r, f);
            let hi = x.get(order[i + 1], f);
            if lo == hi || i + 1 < min_leaf || order.len() - (i + 1) < min_leaf {
                continue;
            }
            let gain = parent - neg_ss(lwy, lw) - neg_ss(swy - lwy, sw - lw);
            if gain > eps && best.is_none_or(|b| gain > b.gain + eps) {
                let mid = lo + (hi - lo) / 2.0;
                let threshold = if mid < hi { mid } else { lo };
                best = Some(SplitCandidate {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

struct Frontier {
    node: usize,
    rows: Vec<usize>,
    split: Option<SplitCandidate>,
}

enum Slot {
    Pending,
    Done(Node),
}

/// Grows one tree over `rows` (row indices into `x`, already deduplicated;
/// bootstrap multiplicity belongs in `w`). `rng` drives per-node feature
/// sampling when `params.max_features` is set.
pub(crate) fn grow<R: Rng>(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    rows: Vec<usize>,
    params: &TreeParams,
    rng: &mut R,
) -> Tree {
    let d = x.n_cols();
    let all_features: Vec<usize> = (0..d).collect();
    let pick_features = |rng: &mut R| -> Vec<usize> {
        match params.max_features {
            Some(k) if k < d => {
                let mut f = index::sample(rng, d, k.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => all_features.clone(),
        }
    };
    let leaf_value = |rows: &[usize]| {
        let (sw, swy) = rows
            .iter()
            .fold((0.0, 0.0), |(a, b), &r| (a + w[r], b + w[r] * y[r]));
        swy / sw
    };

    let mut slots: Vec<Slot> = vec![Slot::Pending];
    // leaves that can still be split, in creation order
    let mut open: Vec<Frontier> = Vec::new();
    let settle = |slots: &mut Vec<Slot>, open: &mut Vec<Frontier>, f: Frontier| match f.split {
        Some(_) => open.push(f),
        None => {
            slots[f.node] = Slot::Done(Node::Leaf {
                value: leaf_value(&f.rows),
            })
        }
    };
    let root_split = best_split(x, y, w, &rows, &pick_features(rng), params.min_samples_leaf);
    settle(
        &mut slots,
        &mut open,
        Frontier {
            node: 0,
            rows,
            split: root_split,
        },
    );
    let mut n_leaves = 1;
    let budget = params.max_leaves.unwrap_or(usize::MAX).max(1);

    while n_leaves < budget && !open.is_empty() {
        let i = if params.max_leaves.is_none() {
            // unbounded growth expands everything; order only affects RNG use
            open.len() - 1
        } else {
            // best-first: highest gain, earliest created on ties
            let mut best = 0;
            for (j, f) in open.iter().enumerate().skip(1) {
                if f.split.unwrap().gain > open[best].split.unwrap().gain {
                    best = j;
                }
            }
            best
        };
        let leaf = open.remove(i);
        let s = leaf.split.unwrap();
        let (lrows, rrows): (Vec<usize>, Vec<usize>) = leaf
            .rows
            .iter()
            .partition(|&&r| x.get(r, s.feature) <= s.threshold);
        let (l, r) = (slots.len(), slots.len() + 1);
        slots.push(Slot::Pending);
        slots.push(Slot::Pending);
        slots[leaf.node] = Slot::Done(Node::Split {
            feature: s.feature,
            threshold: s.threshold,
            left: l,
            right: r,
            gain: s.gain,
        });
        n_leaves += 1;
        let lsplit = best_split(
            x,
            y,
            w,
            &lrows,
            &pick_features(rng),
            params.min_samples_leaf,
        );
        let rsplit = best_split(
            x,
            y,
            w,
            &rrows,
            &pick_features(rng),
            params.min_samples_leaf,
        );
        settle(
            &mut slots,
            &mut open,
            Frontier {
                node: l,
                rows: lrows,
                split: lsplit,
            },
        );
        settle(
            &mut slots,
            &mut open,
            Frontier {
                node: r,
                rows: rrows,
                split: rsplit,
            },
        );
    }
    for f in open {
        slots[f.node] = Slot::Done(Node::Leaf {
            value: leaf_value(&f.rows),
        });
    }
    let nodes: Vec<Node> = slots
        .into_iter()
        .map(|s| match s {
            Slot::Done(n) => n,
            Slot::Pending => unreachable!("every slot is resolved"),
        })
        .collect();
    Tree {
        nodes: to_preorder(&nodes),
    }
}

fn to_preorder(nodes: &[Node]) -> Vec<Node> {
    let mut out = Vec::with_capacity(nodes.len());
    fn visit(nodes: &[Node], i: usize, out: &mut Vec<Node>) -> usize {
        let at = out.len();
        out.push(nodes[i]);
        if let Node::Split {
            feature,
            threshold,
            left,
            right,
            gain,
        } = nodes[i]
        {
            let l = visit(nodes, left, out);
            let r = visit(nodes, right, out);
            out[at] = Node::Split {
                feature,
                threshold,
                left: l,
                right: r,
                gain,
            };
        }
        at
    }
    visit(nodes, 0, &mut out);
    out
}

pub(crate) fn validate_inputs(x: &Matrix, y: &[f64], w: &[f64]) -> Result<()> {
    if x.n_rows() == 0 || x.n_cols() == 0 {
        return Err(Error::invalid("cannot fit a tree on empty input"));
    }
    if y.len() != x.n_rows() || w.len() != x.n_rows() {
        return Err(Error::invalid(format!(
            "{} rows but {} targets and {} weights",
            x.n_rows(),
            y.len(),
            w.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("target {i} is not finite")));
    }
    if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid(format!(
            "weight {i} must be positive and finite"
        )));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "features must be finite (use the sentinel for missing values)",
        ));
    }
    Ok(())
}

/// Fits a single tree on all rows.
pub fn fit_tree(x: &Matrix, y: &[f64], w: &[f64], params: &TreeParams) -> Result<Tree> {
    validate_inputs(x, y, w)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(grow(x, y, w, (0..x.n_rows()).collect(), params, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive split search written straight from the definition
    /// S(node) = Σw·y² − (Σw·y)²/Σw.
    fn brute_force_gain(x: &Matrix, y: &[f64], w: &[f64]) -> f64 {
        let s = |idx: &[usize]| {
            let sw: f64 = idx.iter().map(|&i| w[i]).sum();
            let swy: f64 = idx.iter().map(|&i| w[i] * y[i]).sum();
            let swy2: f64 = idx.iter().map(|&i| w[i] * y[i] * y[i]).sum();
            swy2 - swy * swy / sw
        };
        let all: Vec<usize> = (0..x.n_rows()).collect();
        let parent = s(&all);
        let mut best = 0.0f64;
        for f in 0..x.n_cols() {
            let mut vals: Vec<f64> = all.iter().map(|&i| x.get(i, f)).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for t in vals.windows(2).map(|p| (p[0] + p[1]) / 2.0) {
                let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x.get(i, f) <= t);
                best = best.max(parent - s(&l) - s(&r));
            }
        }
        best
    }

    #[test]
    fn two_point_split() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let t = fit_tree(
            &x,
            &[0.0, 10.0],
            &[1.0, 1.0],
            &TreeParams {
                max_leaves: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        match t.nodes()[0] {
            Node::Split {
                feature, threshold, ..
            } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 0.5);
            }
            _ => panic!("expected split"),
        }
        assert_eq!(t.predict_row(&[0.0]), 0.0);
        assert_eq!(t.predict_row(&[1.0]), 10.0);
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let t = fit_tree(&x, &[5.0; 3], &[1.0, 2.0, 3.0], &TreeParams::default()).unwrap();
        assert_eq!(t.nodes(), &[Node::Leaf { value: 5.0 }]);
    }

    #[test]
    fn empty_input_is_rejected() {
        let x = Matrix::new(vec![], 0, 2).unwrap();
        assert!(fit_tree(&x, &[], &[], &TreeParams::default()).is_err());
    }

    #[test]
    fn six_point_gain_matches_brute_force() {
        let x = Matrix::from_rows(&[
            vec![1.0, 5.0],
            vec![2.0, 3.0],
            vec![3.0, 4.0],
            vec![4.0, 1.0],
            vec![5.0, 2.0],
            vec![6.0, 6.0],
        ])
        .unwrap();
        let y = [1.0, 2.0, 8.0, 9.0, 3.0, 7.5];
        let w = [1.0, 2.0, 1.0, 0.5, 1.0, 3.0];
        let rows: Vec<usize> = (0..6).collect();
        let s = best_split(&x, &y, &w, &rows, &[0, 1], 1).unwrap();
        assert!((s.gain - brute_force_gain(&x, &y, &w)).abs() < 1e-9);
    }

    #[test]
    fn ties_prefer_lowest_feature_then_threshold() {
        // both features identical: feature 0 must win
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
        ])
        .unwrap();
        let y = [0.0, 1.0, 0.0, 1.0];
        let s = best_split(&x, &y, &[1.0; 4], &[0, 1, 2, 3], &[0, 1], 1).unwrap();
        assert_eq!(s.feature, 0);
        // thresholds 0.5 and 2.5 tie (gain 1/3 each); lowest wins
        assert_eq!(s.threshold, 0.5);
    }

    #[test]
    fn leaf_budget_is_respected() {
        let x = Matrix::from_rows(&(0..20).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        let y: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        for leaves in 1..8 {
            let t = fit_tree(
                &x,
                &y,
                &[1.0; 20],
                &TreeParams {
                    max_leaves: Some(leaves),
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(t.n_leaves(), leaves);
        }
        let t = fit_tree(&x, &y, &[1.0; 20], &TreeParams::default()).unwrap();
        for i in 0..20 {
            assert_eq!(t.predict_row(&[i as f64]), y[i]);
        }
    }

    #[test]
    fn sentinel_routes_left_as_a_small_value() {
        let x = Matrix::from_rows(&[vec![-999.0], vec![1.0], vec![2.0]]).unwrap();
        let t = fit_tree(&x, &[0.0, 5.0, 5.0], &[1.0; 3], &TreeParams::default()).unwrap();
        assert_eq!(t.predict_row(&[-999.0]), 0.0);
        assert_eq!(t.predict_row(&[1.5]), 5.0);
    }

    #[test]
    fn from_nodes_rejects_bad_links() {
        let bad = vec![
            Node::Split {
                feature: 0,
                threshold: 0.0,
                left: 1,
                right: 1,
                gain: 1.0,
            },
            Node::Leaf { value: 0.0 },
        ];
        assert!(Tree::from_nodes(bad).is_err());
        assert!(Tree::from_nodes(vec![]).is_err());
    }

    fn dataset() -> impl Strategy<Value = (Matrix, Vec<f64>, Vec<f64>)> {
        (1usize..=8, 1usize..=3).prop_flat_map(|(n, d)| {
            (
                proptest::collection::vec(0u8..4, n * d),
                proptest::collection::vec(-5i8..6, n),
                proptest::collection::vec(1u8..4, n),
            )
                .prop_map(move |(xs, ys, ws)| {
                    let x = Matrix::new(xs.into_iter().map(f64::from).collect(), n, d).unwrap();
                    (
                        x,
                        ys.into_iter().map(f64::from).collect(),
                        ws.into_iter().map(|v| v as f64 * 0.5).collect(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn root_split_matches_exhaustive_search((x, y, w) in dataset()) {
            let rows: Vec<usize> = (0..x.n_rows()).collect();
            let feats: Vec<usize> = (0..x.n_cols()).collect();
            let got = best_split(&x, &y, &w, &rows, &feats, 1).map_or(0.0, |s| s.gain);
            let want = brute_force_gain(&x, &y, &w);
            prop_assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }

        #[test]
        fn accepted_splits_have_positive_gain((x, y, w) in dataset()) {
            let t = fit_tree(&x, &y, &w, &TreeParams::default()).unwrap();
            for n in t.nodes() {
                if let Node::Split { gain, .. } = n {
                    prop_assert!(*gain >= 0.0);
                }
            }
        }

        #[test]
        fn weight_scale_invariance((x, y, w) in dataset(), k in 1u8..5) {
            let c = k as f64 * 2.0;
            let w2: Vec<f64> = w.iter().map(|v| v * c).collect();
            let p = TreeParams { max_leaves: Some(4), ..Default::default() };
            let a = fit_tree(&x, &y, &w, &p).unwrap();
            let b = fit_tree(&x, &y, &w2, &p).unwrap();
            prop_assert_eq!(a.nodes().len(), b.nodes().len());
            for (na, nb) in a.nodes().iter().zip(b.nodes()) {
                match (na, nb) {
                    (Node::Leaf { value: va }, Node::Leaf { value: vb }) => prop_assert!((va - vb).abs() < 1e-9),
                    (Node::Split { feature: fa, threshold: ta, left: la, right: ra, .. },
                     Node::Split { feature: fb, threshold: tb, left: lb, right: rb, .. }) => {
                        prop_assert_eq!((fa, la, ra), (fb, lb, rb));
                        prop_assert_eq!(ta, tb);
                    }
                    _ => prop_assert!(false, "structure differs"),
                }
            }
        }
    }
}
