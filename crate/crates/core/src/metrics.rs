//! RMSE, region-averaged RMSE, confusion matrix and accuracy summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Region;

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("rmse of an empty set"));
    }
    if y.len() != yhat.len() {
        return Err(Error::invalid(format!(
            "rmse length mismatch: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Unweighted mean of the four per-region scores.
pub fn region_mean(per_region: &BTreeMap<Region, f64>) -> Result<f64> {
    let mut total = 0.0;
    for r in Region::ALL {
        total += per_region
            .get(&r)
            .ok_or_else(|| Error::invalid(format!("no score for region {r}")))?;
    }
    Ok(total / Region::ALL.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub per_region: BTreeMap<Region, f64>,
    pub region_mean: f64,
    pub samples_mean: f64,
}

/// RMSE per region, its unweighted mean, and the plain RMSE over all rows.
/// Every region must have at least one row.
pub fn ra_rmse(y: &[f64], yhat: &[f64], regions: &[Region]) -> Result<RegionScores> {
    if y.len() != regions.len() {
        return Err(Error::invalid("regions and targets differ in length"));
    }
    let samples_mean = rmse(y, yhat)?;
    let mut per_region = BTreeMap::new();
    for r in Region::ALL {
        let (a, b): (Vec<f64>, Vec<f64>) = y
            .iter()
            .zip(yhat)
            .zip(regions)
            .filter(|(_, &g)| g == r)
            .map(|((a, b), _)| (*a, *b))
            .unzip();
        if a.is_empty() {
            return Err(Error::invalid(format!(
                "region {r} has no rows; region-averaged RMSE is undefined"
            )));
        }
        per_region.insert(r, rmse(&a, &b)?);
    }
    Ok(RegionScores {
        region_mean: region_mean(&per_region)?,
        per_region,
        samples_mean,
    })
}

/// 5×5 counts; `m[i][j]` counts rows with true class `i+1` predicted `j+1`.
pub type Confusion = [[u64; 5]; 5];

pub fn confusion_matrix(true_sev: &[u8], pred_sev: &[u8]) -> Result<Confusion> {
    if true_sev.len() != pred_sev.len() {
        return Err(Error::invalid("confusion inputs differ in length"));
    }
    let mut m = [[0u64; 5]; 5];
    for (&t, &p) in true_sev.iter().zip(pred_sev) {
        if !(1..=5).contains(&t) || !(1..=5).contains(&p) {
            return Err(Error::invalid(format!(
                "class out of range: true {t}, predicted {p}"
            )));
        }
        m[t as usize - 1][p as usize - 1] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub overall: f64,
    /// Diagonal share of the rows with true class 4 or 5; `None` when there
    /// are no such rows.
    pub severe: Option<f64>,
}

pub fn accuracy_summary(m: &Confusion) -> Result<Accuracy> {
    let total: u64 = m.iter().flatten().sum();
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    let trace: u64 = (0..5).map(|i| m[i][i]).sum();
    let severe_rows: u64 = m[3].iter().chain(&m[4]).sum();
    let severe = (severe_rows > 0).then(|| (m[3][3] + m[4][4]) as f64 / severe_rows as f64);
    Ok(Accuracy {
        overall: trace as f64 / total as f64,
        severe,
    })
}

/// Evaluation of severity predictions, serialized with fixed key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_region: BTreeMap<Region, f64>,
    pub region_mean: f64,
    pub samples_mean: f64,
    pub confusion: Confusion,
    pub accuracy_overall: f64,
    pub accuracy_severe: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table with the per-region, region-mean and samples-mean
    /// columns.
    pub fn table(&self, label: &str) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>10} {:>8} {:>12} {:>13}\n",
            "model", "South", "West", "Northeast", "Midwest", "Region mean", "samples mean"
        );
        s.push_str(&self.table_row(label));
        s
    }

    pub fn table_row(&self, label: &str) -> String {
        let g = |r| self.per_region.get(&r).copied().unwrap_or(f64::NAN);
        format!(
            "{:<10} {:>8.3} {:>8.3} {:>10.3} {:>8.3} {:>12.3} {:>13.3}\n",
            label,
            g(Region::South),
            g(Region::West),
            g(Region::Northeast),
            g(Region::Midwest),
            self.region_mean,
            self.samples_mean
        )
    }
}

/// Full report for severity classes against true classes.
pub fn evaluate(true_sev: &[u8], pred_sev: &[u8], regions: &[Region]) -> Result<EvalReport> {
    let y: Vec<f64> = true_sev.iter().map(|&v| v as f64).collect();
    let yhat: Vec<f64> = pred_sev.iter().map(|&v| v as f64).collect();
    let scores = ra_rmse(&y, &yhat, regions)?;
    let confusion = confusion_matrix(true_sev, pred_sev)?;
    let acc = accuracy_summary(&confusion)?;
    Ok(EvalReport {
        per_region: scores.per_region,
        region_mean: scores.region_mean,
        samples_mean: scores.samples_mean,
        confusion,
        accuracy_overall: acc.overall,
        accuracy_severe: acc.severe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const REFERENCE_CONFUSION: Confusion = [
        [4975, 2347, 152, 22, 1],
        [1096, 1825, 275, 37, 6],
        [343, 1382, 692, 300, 2],
        [7, 106, 205, 3226, 3],
        [0, 8, 19, 29, 2],
    ];

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 1.0);
        assert!((rmse(&[0.0; 3], &[3.0, 0.0, 0.0]).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn region_mean_of_reference_rows() {
        let ens: BTreeMap<Region, f64> = [
            (Region::South, 0.763),
            (Region::West, 0.398),
            (Region::Northeast, 0.822),
            (Region::Midwest, 0.816),
        ]
        .into();
        assert!((region_mean(&ens).unwrap() - 0.69975).abs() < 1e-12);
        let rf: BTreeMap<Region, f64> = [
            (Region::South, 0.769),
            (Region::West, 0.424),
            (Region::Northeast, 0.818),
            (Region::Midwest, 0.809),
        ]
        .into();
        assert!((region_mean(&rf).unwrap() - 0.705).abs() < 5e-4);
    }

    #[test]
    fn exact_predictions_score_zero() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let s = ra_rmse(&y, &y, &Region::ALL).unwrap();
        assert_eq!(s.region_mean, 0.0);
        assert_eq!(s.samples_mean, 0.0);
        assert!(ra_rmse(&y[..3], &y[..3], &Region::ALL[..3]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[4], &[4]).unwrap();
        assert_eq!(m[3][3], 1);
        assert_eq!(m.iter().flatten().sum::<u64>(), 1);
        assert!(confusion_matrix(&[0], &[1]).is_err());
        assert!(confusion_matrix(&[1], &[6]).is_err());
    }

    #[test]
    fn reference_matrix_accuracies() {
        let m = REFERENCE_CONFUSION;
        assert_eq!(m.iter().flatten().sum::<u64>(), 17060);
        assert_eq!((0..5).map(|i| m[i][i]).sum::<u64>(), 10720);
        let a = accuracy_summary(&m).unwrap();
        assert!((a.overall - 0.628).abs() < 1e-3);
        assert!((a.severe.unwrap() - 0.895).abs() < 1e-3);
        assert_eq!(a.severe.unwrap(), 3228.0 / 3605.0);
    }

    #[test]
    fn accuracy_edge_cases() {
        let mut m = [[0u64; 5]; 5];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 10;
        }
        let a = accuracy_summary(&m).unwrap();
        assert_eq!((a.overall, a.severe), (1.0, Some(1.0)));

        let mut m = [[0u64; 5]; 5];
        m[0][4] = 7;
        let a = accuracy_summary(&m).unwrap();
        assert_eq!((a.overall, a.severe), (0.0, None));
        assert!(accuracy_summary(&[[0; 5]; 5]).is_err());
    }

    #[test]
    fn report_json_keys() {
        let r = evaluate(&[1, 2, 3, 4], &[1, 2, 3, 5], &Region::ALL).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for k in [
            "per_region",
            "region_mean",
            "samples_mean",
            "confusion",
            "accuracy_overall",
            "accuracy_severe",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(v["per_region"].get("northeast").is_some());
    }

    fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Region>)> {
        (4usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..5.0, n),
                proptest::collection::vec(0.0f64..5.0, n),
                proptest::collection::vec(0usize..4, n),
            )
                .prop_map(|(a, b, r)| {
                    let mut regions: Vec<Region> = r.into_iter().map(|i| Region::ALL[i]).collect();
                    regions[..4].copy_from_slice(&Region::ALL);
                    (a, b, regions)
                })
        })
    }

    proptest! {
        #[test]
        fn rmse_symmetric_and_nonnegative(a in proptest::collection::vec(-10.0f64..10.0, 1..30)) {
            let b: Vec<f64> = a.iter().rev().cloned().collect();
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            prop_assert!(rmse(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn samples_mean_decomposes_over_regions((y, yh, regions) in labelled()) {
            let s = ra_rmse(&y, &yh, &regions).unwrap();
            let n = y.len() as f64;
            let rhs: f64 = Region::ALL.iter().map(|r| {
                let cnt = regions.iter().filter(|g| *g == r).count() as f64;
                s.per_region[r].powi(2) * cnt
            }).sum();
            prop_assert!((s.samples_mean.powi(2) * n - rhs).abs() < 1e-9);
        }

        #[test]
        fn region_mean_is_permutation_invariant((y, yh, regions) in labelled(), shift in 0usize..40) {
            let n = y.len();
            let k = shift % n;
            let rot = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(k); v };
            let mut rr = regions.clone();
            rr.rotate_left(k);
            let a = ra_rmse(&y, &yh, &regions).unwrap().region_mean;
            let b = ra_rmse(&rot(&y), &rot(&yh), &rr).unwrap().region_mean;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn confusion_rows_are_true_counts(
            t in proptest::collection::vec(1u8..=5, 0..50),
            seed in any::<u8>(),
        ) {
            let p: Vec<u8> = t.iter().enumerate().map(|(i, _)| ((i as u8).wrapping_add(seed) % 5) + 1).collect();
            let m = confusion_matrix(&t, &p).unwrap();
            for c in 0..5 {
                let want = t.iter().filter(|&&v| v as usize == c + 1).count() as u64;
                prop_assert_eq!(m[c].iter().sum::<u64>(), want);
            }
        }
    }
}
