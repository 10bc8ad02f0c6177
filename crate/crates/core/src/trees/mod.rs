//! Tree ensembles: weighted CART regression trees, a bootstrap random forest
//! and a leaf-wise gradient-boosted ensemble, with gain-based importance.

mod cart;
mod forest;
mod gbdt;
mod persist;

pub use cart::{best_split, fit_tree, Node, SplitCandidate, Tree, TreeParams};
pub use forest::{fit_forest, ForestModel, ForestParams, MaxFeatures};
pub use gbdt::{fit_gbdt, GbdtModel, GbdtParams};
pub use persist::{MODEL_MAGIC, MODEL_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f64>, n_rows: usize, n_cols: usize) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::invalid(format!(
                "{} values do not fill a {n_rows}x{n_cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix {
            data,
            n_rows,
            n_cols,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {n_cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            data,
            n_rows: rows.len(),
            n_cols,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols + col]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            data,
            n_rows: rows.len(),
            n_cols: self.n_cols,
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Matrix> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.n_cols) {
            return Err(Error::invalid(format!(
                "column {c} out of range for {} columns",
                self.n_cols
            )));
        }
        let mut data = Vec::with_capacity(self.n_rows * cols.len());
        for i in 0..self.n_rows {
            let row = self.row(i);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Ok(Matrix {
            data,
            n_rows: self.n_rows,
            n_cols: cols.len(),
        })
    }
}

/// Per-feature share of the total split gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance(pub Vec<f64>);

impl FeatureImportance {
    fn from_gains(gains: Vec<f64>) -> Self {
        let total: f64 = gains.iter().sum();
        if total > 0.0 {
            FeatureImportance(gains.into_iter().map(|g| g / total).collect())
        } else {
            FeatureImportance(vec![0.0; gains.len()])
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Element-wise mean, e.g. across cross-validation folds.
    pub fn mean(items: &[FeatureImportance]) -> Result<FeatureImportance> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("no importances to average"))?;
        let d = first.0.len();
        if items.iter().any(|i| i.0.len() != d) {
            return Err(Error::invalid("importances of different lengths"));
        }
        let k = items.len() as f64;
        Ok(FeatureImportance(
            (0..d)
                .map(|j| items.iter().map(|i| i.0[j]).sum::<f64>() / k)
                .collect(),
        ))
    }
}

pub(crate) fn importance_of(trees: &[Tree], n_features: usize) -> FeatureImportance {
    let mut gains = vec![0.0; n_features];
    for t in trees {
        t.add_gains(&mut gains);
    }
    FeatureImportance::from_gains(gains)
}

/// Indices whose importance is strictly above `threshold`, ascending.
pub fn select_features(importance: &FeatureImportance, threshold: f64) -> Vec<usize> {
    importance
        .0
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| i)
        .collect()
}

pub const DEFAULT_IMPORTANCE_THRESHOLD: f64 = 0.005;

/// A fitted ensemble of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Forest(ForestModel),
    Gbdt(GbdtModel),
}

impl Model {
    pub fn n_features(&self) -> usize {
        match self {
            Model::Forest(m) => m.n_features,
            Model::Gbdt(m) => m.n_features,
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            Model::Forest(m) => m.predict(x),
            Model::Gbdt(m) => m.predict(x),
        }
    }

    pub fn feature_importance(&self) -> FeatureImportance {
        match self {
            Model::Forest(m) => m.feature_importance(),
            Model::Gbdt(m) => m.feature_importance(),
        }
    }

    pub fn trees(&self) -> &[Tree] {
        match self {
            Model::Forest(m) => &m.trees,
            Model::Gbdt(m) => &m.trees,
        }
    }
}

pub(crate) fn check_dims(x: &Matrix, n_features: usize) -> Result<()> {
    if x.n_cols() != n_features {
        return Err(Error::DimensionMismatch {
            expected: n_features,
            actual: x.n_cols(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_examples() {
        let mut v = vec![0.0; 45];
        v[0] = 0.9;
        v[1] = 0.1;
        assert_eq!(select_features(&FeatureImportance(v), 0.005), vec![0, 1]);
        let all = FeatureImportance(vec![1.0 / 45.0; 45]);
        assert_eq!(select_features(&all, 0.005).len(), 45);
        assert!(select_features(&all, 1.0).is_empty());
        // strictly greater
        assert!(select_features(&FeatureImportance(vec![0.005]), 0.005).is_empty());
    }

    #[test]
    fn single_split_importance() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let t = fit_tree(&x, &[1.0, 2.0], &[1.0, 1.0], &TreeParams::default()).unwrap();
        let imp = importance_of(&[t], 3);
        assert_eq!(imp.0, vec![0.0, 0.0, 1.0]);
        assert_eq!(importance_of(&[Tree::leaf(1.0)], 3).0, vec![0.0; 3]);
    }

    #[test]
    fn mean_importance() {
        let m = FeatureImportance::mean(&[
            FeatureImportance(vec![1.0, 0.0]),
            FeatureImportance(vec![0.5, 0.5]),
        ])
        .unwrap();
        assert_eq!(m.0, vec![0.75, 0.25]);
        assert!(FeatureImportance::mean(&[]).is_err());
    }

    #[test]
    fn matrix_selection() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.select_columns(&[2, 0]).unwrap().row(1), &[6.0, 4.0]);
        assert_eq!(m.select_rows(&[1]).row(0), &[4.0, 5.0, 6.0]);
        assert!(m.select_columns(&[3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
