use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cart::{grow, validate_inputs, Tree, TreeParams};
use super::{check_dims, importance_of, FeatureImportance, Matrix};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub num_leaves: usize,
    /// Fraction of rows drawn without replacement on bagging rounds.
    pub bagging_fraction: f64,
    /// Bagging happens on rounds where `round % bagging_freq == 0`; 0 disables it.
    pub bagging_freq: usize,
    /// Alias of `bagging_fraction` in the reference library, where the
    /// latter wins. Kept for provenance, never read.
    pub subsample: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            rounds: 600,
            learning_rate: 0.025,
            num_leaves: 20,
            bagging_fraction: 0.9,
            bagging_freq: 6,
            subsample: 0.8,
            min_samples_leaf: 1,
        }
    }
}

impl GbdtParams {
    fn bags_on(&self, round: usize) -> bool {
        self.bagging_freq > 0
            && self.bagging_fraction < 1.0
            && round.is_multiple_of(self.bagging_freq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub trees: Vec<Tree>,
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub params: GbdtParams,
    pub seed: u64,
}

/// Squared-error boosting: each round fits a leaf-wise tree with at most
/// `num_leaves` leaves to the current residuals. No early stopping.
pub fn fit_gbdt(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    params: &GbdtParams,
    seed: u64,
) -> Result<GbdtModel> {
    validate_inputs(x, y, w)?;
    let n = x.n_rows();
    let sw: f64 = w.iter().sum();
    let base_score = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let tree_params = TreeParams {
        max_leaves: Some(params.num_leaves.max(1)),
        min_samples_leaf: params.min_samples_leaf,
        max_features: None,
    };
    let bag_size = ((params.bagging_fraction * n as f64).floor() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = vec![base_score; n];
    let mut residual = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.rounds);
    for round in 0..params.rounds {
        for i in 0..n {
            residual[i] = y[i] - current[i];
        }
        let rows: Vec<usize> = if params.bags_on(round) {
            let mut r = index::sample(&mut rng, n, bag_size).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let tree = grow(x, &residual, w, rows, &tree_params, &mut rng);
        for (i, c) in current.iter_mut().enumerate() {
            *c += params.learning_rate * tree.predict_row(x.row(i));
        }
        trees.push(tree);
    }
    Ok(GbdtModel {
        trees,
        base_score,
        learning_rate: params.learning_rate,
        n_features: x.n_cols(),
        params: *params,
        seed,
    })
}

impl GbdtModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        check_dims(x, self.n_features)?;
        Ok((0..x.n_rows())
            .map(|i| {
                let row = x.row(i);
                let mut acc = self.base_score;
                for t in &self.trees {
                    acc += self.learning_rate * t.predict_row(row);
                }
                acc
            })
            .collect())
    }

    /// Predictions after each boosting round; entry `k` uses the first
    /// `k + 1` trees.
    pub fn staged_predict(&self, x: &Matrix) -> Result<Vec<Vec<f64>>> {
        check_dims(x, self.n_features)?;
        let mut current = vec![self.base_score; x.n_rows()];
        let mut stages = Vec::with_capacity(self.trees.len());
        for t in &self.trees {
            for (i, c) in current.iter_mut().enumerate() {
                *c += self.learning_rate * t.predict_row(x.row(i));
            }
            stages.push(current.clone());
        }
        Ok(stages)
    }

    pub fn feature_importance(&self) -> FeatureImportance {
        importance_of(&self.trees, self.n_features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rmse;

    fn parabola(n: usize) -> (Matrix, Vec<f64>) {
        let xs: Vec<f64> = (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .collect();
        let x = Matrix::new(xs.clone(), n, 1).unwrap();
        (x, xs.iter().map(|v| v * v).collect())
    }

    #[test]
    fn one_leaf_one_round_predicts_weighted_mean() {
        let (x, y) = parabola(10);
        let w: Vec<f64> = (1..=10).map(f64::from).collect();
        let p = GbdtParams {
            rounds: 1,
            learning_rate: 1.0,
            num_leaves: 1,
            bagging_freq: 0,
            ..Default::default()
        };
        let m = fit_gbdt(&x, &y, &w, &p, 0).unwrap();
        let mean = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
        for v in m.predict(&x).unwrap() {
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rounds_predicts_base_score() {
        let (x, y) = parabola(5);
        let m = fit_gbdt(
            &x,
            &y,
            &[1.0; 5],
            &GbdtParams {
                rounds: 0,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(m.predict(&x).unwrap().iter().all(|&v| v == m.base_score));
    }

    #[test]
    fn training_error_decreases_on_full_row_rounds() {
        let (x, y) = parabola(50);
        let p = GbdtParams {
            rounds: 200,
            learning_rate: 0.025,
            num_leaves: 20,
            ..Default::default()
        };
        let m = fit_gbdt(&x, &y, &[1.0; 50], &p, 4).unwrap();
        let stages = m.staged_predict(&x).unwrap();
        let mut prev = rmse(&y, &vec![m.base_score; 50]).unwrap();
        for (k, s) in stages.iter().enumerate() {
            let e = rmse(&y, s).unwrap();
            if k % 6 != 0 {
                assert!(e < prev, "round {k}: {e} >= {prev}");
            }
            prev = e;
        }
        assert_eq!(stages.last().unwrap(), &m.predict(&x).unwrap());
    }

    #[test]
    fn doubling_weights_changes_nothing() {
        let (x, y) = parabola(30);
        let p = GbdtParams {
            rounds: 20,
            learning_rate: 0.1,
            num_leaves: 5,
            ..Default::default()
        };
        let a = fit_gbdt(&x, &y, &[1.0; 30], &p, 2).unwrap();
        let b = fit_gbdt(&x, &y, &[2.0; 30], &p, 2).unwrap();
        assert_eq!(a.trees.len(), b.trees.len());
        for (pa, pb) in a.predict(&x).unwrap().iter().zip(b.predict(&x).unwrap()) {
            assert!((pa - pb).abs() < 1e-9);
        }
    }

    #[test]
    fn row_permutation_permutes_predictions() {
        let (x, y) = parabola(20);
        let m = fit_gbdt(
            &x,
            &y,
            &[1.0; 20],
            &GbdtParams {
                rounds: 30,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let perm: Vec<usize> = (0..20).rev().collect();
        let p = m.predict(&x).unwrap();
        let q = m.predict(&x.select_rows(&perm)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(q[k], p[i]);
        }
    }
}
