use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cart::{grow, validate_inputs, Tree, TreeParams};
use super::{check_dims, importance_of, FeatureImportance, Matrix};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    All,
    /// `max(1, floor(d / 3))`
    Third,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            MaxFeatures::All => d,
            MaxFeatures::Third => (d / 3).max(1),
            MaxFeatures::Count(k) => k.clamp(1, d.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub max_features: MaxFeatures,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_estimators: 300,
            max_features: MaxFeatures::Third,
            min_samples_leaf: 1,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub params: ForestParams,
    pub seed: u64,
}

/// Fits `n_estimators` depth-unbounded trees. Tree `t` draws its bootstrap
/// sample and per-node features from a generator seeded with `seed + t`, so
/// the result does not depend on how trees are scheduled across threads.
pub fn fit_forest(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<ForestModel> {
    validate_inputs(x, y, w)?;
    let n = x.n_rows();
    let d = x.n_cols();
    let tree_params = TreeParams {
        max_leaves: None,
        min_samples_leaf: params.min_samples_leaf,
        max_features: Some(params.max_features.resolve(d)),
    };
    let trees = (0..params.n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            if params.bootstrap {
                let mut counts = vec![0u32; n];
                for _ in 0..n {
                    counts[rng.gen_range(0..n)] += 1;
                }
                let rows: Vec<usize> = (0..n).filter(|&i| counts[i] > 0).collect();
                let bw: Vec<f64> = w.iter().zip(&counts).map(|(w, &c)| w * c as f64).collect();
                grow(x, y, &bw, rows, &tree_params, &mut rng)
            } else {
                grow(x, y, w, (0..n).collect(), &tree_params, &mut rng)
            }
        })
        .collect();
    Ok(ForestModel {
        trees,
        n_features: d,
        params: *params,
        seed,
    })
}

impl ForestModel {
    /// Unweighted mean of the tree predictions.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        check_dims(x, self.n_features)?;
        let k = self.trees.len().max(1) as f64;
        Ok((0..x.n_rows())
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / k
            })
            .collect())
    }

    pub fn feature_importance(&self) -> FeatureImportance {
        importance_of(&self.trees, self.n_features)
    }
}
