//! Nelder-Mead simplex minimizer and cut-point calibration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ra_rmse, rmse};
use crate::model::Region;

/// Reflection, expansion, contraction and shrink coefficients.
pub const ALPHA: f64 = 1.0;
pub const GAMMA: f64 = 2.0;
pub const RHO: f64 = 0.5;
pub const SIGMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOpts {
    pub max_iter: usize,
    pub xatol: f64,
    pub fatol: f64,
    /// Initial step as a fraction of `|x0_i|`.
    pub init_step: f64,
    /// Initial step for coordinates where `x0_i == 0`.
    pub zero_step: f64,
    /// Extra candidates. Each one replaces the worst vertex of the initial
    /// simplex when it scores better.
    pub seeds: Vec<Vec<f64>>,
}

impl Default for NelderMeadOpts {
    fn default() -> Self {
        NelderMeadOpts {
            max_iter: 2000,
            xatol: 1e-4,
            fatol: 1e-4,
            init_step: 0.05,
            zero_step: 0.00025,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fun: f64,
    pub iterations: usize,
    pub nfev: usize,
    pub converged: bool,
}

/// `d + 1` vertices kept sorted by function value, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexState {
    pub vertices: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub nfev: usize,
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

fn affine(a: &[f64], ca: f64, b: &[f64], cb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect()
}

impl SimplexState {
    pub fn new<F: FnMut(&[f64]) -> f64>(
        f: &mut F,
        x0: &[f64],
        opts: &NelderMeadOpts,
    ) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::invalid("Nelder-Mead needs at least one dimension"));
        }
        let f0 = f(x0);
        if !f0.is_finite() {
            return Err(Error::invalid(format!(
                "objective is not finite at the initial point ({f0})"
            )));
        }
        let mut vertices = vec![x0.to_vec()];
        let mut values = vec![f0];
        for i in 0..x0.len() {
            let mut v = x0.to_vec();
            v[i] = if v[i] != 0.0 {
                (1.0 + opts.init_step) * v[i]
            } else {
                opts.zero_step
            };
            values.push(finite_or_inf(f(&v)));
            vertices.push(v);
        }
        let mut s = SimplexState {
            vertices,
            values,
            iterations: 0,
            nfev: x0.len() + 1,
        };
        s.sort();
        for seed in &opts.seeds {
            if seed.len() != x0.len() {
                return Err(Error::DimensionMismatch {
                    expected: x0.len(),
                    actual: seed.len(),
                });
            }
            let fs = finite_or_inf(f(seed));
            s.nfev += 1;
            if fs < *s.values.last().unwrap() {
                *s.vertices.last_mut().unwrap() = seed.clone();
                *s.values.last_mut().unwrap() = fs;
                s.sort();
            }
        }
        Ok(s)
    }

    fn sort(&mut self) {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]));
        self.vertices = idx.iter().map(|&i| self.vertices[i].clone()).collect();
        self.values = idx.iter().map(|&i| self.values[i]).collect();
    }

    pub fn converged(&self, xatol: f64, fatol: f64) -> bool {
        let best = &self.vertices[0];
        let xspread = self.vertices[1..]
            .iter()
            .flat_map(|v| v.iter().zip(best).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let fspread = self.values[1..]
            .iter()
            .map(|v| (v - self.values[0]).abs())
            .fold(0.0, f64::max);
        xspread <= xatol && fspread <= fatol
    }

    /// One reflect / expand / contract / shrink iteration.
    pub fn step<F: FnMut(&[f64]) -> f64>(&mut self, f: &mut F) {
        let n = self.vertices.len() - 1;
        let mut eval = |x: &[f64], nfev: &mut usize| {
            *nfev += 1;
            finite_or_inf(f(x))
        };
        let mut centroid = vec![0.0; n];
        for v in &self.vertices[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let worst = self.vertices[n].clone();
        let f_best = self.values[0];
        let f_second = self.values[n - 1];
        let f_worst = self.values[n];

        let xr = affine(&centroid, 1.0 + ALPHA, &worst, -ALPHA);
        let fr = eval(&xr, &mut self.nfev);
        let mut shrink = false;
        if fr < f_best {
            let xe = affine(&centroid, 1.0 + ALPHA * GAMMA, &worst, -ALPHA * GAMMA);
            let fe = eval(&xe, &mut self.nfev);
            if fe < fr {
                self.vertices[n] = xe;
                self.values[n] = fe;
            } else {
                self.vertices[n] = xr;
                self.values[n] = fr;
            }
        } else if fr < f_second {
            self.vertices[n] = xr;
            self.values[n] = fr;
        } else if fr < f_worst {
            let xc = affine(&centroid, 1.0 + RHO * ALPHA, &worst, -RHO * ALPHA);
            let fc = eval(&xc, &mut self.nfev);
            if fc <= fr {
                self.vertices[n] = xc;
                self.values[n] = fc;
            } else {
                shrink = true;
            }
        } else {
            let xcc = affine(&centroid, 1.0 - RHO, &worst, RHO);
            let fcc = eval(&xcc, &mut self.nfev);
            if fcc < f_worst {
                self.vertices[n] = xcc;
                self.values[n] = fcc;
            } else {
                shrink = true;
            }
        }
        if shrink {
            let best = self.vertices[0].clone();
            for j in 1..=n {
                self.vertices[j] = affine(&best, 1.0 - SIGMA, &self.vertices[j], SIGMA);
                self.values[j] = eval(&self.vertices[j], &mut self.nfev);
            }
        }
        self.iterations += 1;
        self.sort();
    }
}

/// Minimizes `f` from `x0`. The returned value never exceeds `f(x0)` or the
/// value at any seed.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &NelderMeadOpts,
) -> Result<NelderMeadResult> {
    let mut s = SimplexState::new(&mut f, x0, opts)?;
    let mut converged = s.converged(opts.xatol, opts.fatol);
    while !converged && s.iterations < opts.max_iter {
        s.step(&mut f);
        converged = s.converged(opts.xatol, opts.fatol);
    }
    Ok(NelderMeadResult {
        x: s.vertices[0].clone(),
        fun: s.values[0],
        iterations: s.iterations,
        nfev: s.nfev,
        converged,
    })
}

/// Four strictly increasing positive thresholds on the sqrt-density axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct CutPoints([f64; 4]);

impl CutPoints {
    pub fn new(c: [f64; 4]) -> Result<Self> {
        if c.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid(format!(
                "cut points must be finite and positive: {c:?}"
            )));
        }
        if c.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "cut points must be strictly increasing: {c:?}"
            )));
        }
        Ok(CutPoints(c))
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }
}

impl TryFrom<[f64; 4]> for CutPoints {
    type Error = Error;
    fn try_from(c: [f64; 4]) -> Result<Self> {
        CutPoints::new(c)
    }
}

impl From<CutPoints> for [f64; 4] {
    fn from(c: CutPoints) -> Self {
        c.0
    }
}

/// Reference thresholds used as a calibration seed.
pub const REFERENCE_CUTS: [f64; 4] = [180.0, 440.0, 979.0, 2926.0];

pub const DEFAULT_CLIP_CAP: u8 = 4;

/// `1 + #{c : c <= pred}`, so each interval is closed below.
pub fn severity_from_cutpoints(pred: f64, cuts: &CutPoints) -> u8 {
    1 + cuts.0.iter().filter(|&&c| c <= pred).count() as u8
}

pub fn clip_severity(sev: u8, cap: u8) -> u8 {
    sev.min(cap)
}

/// Classes for every prediction, then clipped to `cap`.
pub fn apply_cuts(preds: &[f64], cuts: &CutPoints, cap: u8) -> Vec<u8> {
    preds
        .iter()
        .map(|&p| clip_severity(severity_from_cutpoints(p, cuts), cap))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMetric {
    #[default]
    RaRmse,
    Rmse,
}

impl fmt::Display for CalibrationMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMetric::RaRmse => "ra_rmse",
            CalibrationMetric::Rmse => "rmse",
        })
    }
}

impl FromStr for CalibrationMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ra_rmse" | "ra-rmse" => Ok(CalibrationMetric::RaRmse),
            "rmse" => Ok(CalibrationMetric::Rmse),
            other => Err(Error::Config(format!(
                "unknown calibration metric '{other}'"
            ))),
        }
    }
}

/// Objective value of candidates that are not strictly increasing and
/// positive after sorting.
pub const INVALID_CUTS_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOpts {
    pub metric: CalibrationMetric,
    pub nelder_mead: NelderMeadOpts,
    /// Candidate cut vectors offered to the optimizer as seed vertices.
    pub seeds: Vec<[f64; 4]>,
    pub clip_cap: u8,
}

impl Default for CalibrationOpts {
    fn default() -> Self {
        CalibrationOpts {
            metric: CalibrationMetric::RaRmse,
            nelder_mead: NelderMeadOpts::default(),
            seeds: vec![REFERENCE_CUTS],
            clip_cap: DEFAULT_CLIP_CAP,
        }
    }
}

/// Persisted calibration result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedCuts {
    pub cuts: CutPoints,
    pub objective: f64,
    pub metric: CalibrationMetric,
    pub clip_cap: u8,
}

impl FittedCuts {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Calibration objective for one candidate: the candidate is sorted first,
/// and sorted vectors with repeated or non-positive entries get the penalty.
pub fn cut_objective(
    candidate: &[f64],
    oof: &[f64],
    truth: &[f64],
    regions: &[Region],
    metric: CalibrationMetric,
) -> f64 {
    let mut c = [0.0; 4];
    c.copy_from_slice(&candidate[..4]);
    c.sort_by(f64::total_cmp);
    let Ok(cuts) = CutPoints::new(c) else {
        return INVALID_CUTS_PENALTY;
    };
    let pred: Vec<f64> = oof
        .iter()
        .map(|&p| severity_from_cutpoints(p, &cuts) as f64)
        .collect();
    let v = match metric {
        CalibrationMetric::RaRmse => ra_rmse(truth, &pred, regions).map(|s| s.region_mean),
        CalibrationMetric::Rmse => rmse(truth, &pred),
    };
    v.unwrap_or(INVALID_CUTS_PENALTY)
}

/// Start point: for each of the first four classes, the midpoint between
/// the sorted predictions on either side of that class's cumulative count,
/// nudged to be strictly increasing and positive.
pub fn initial_cuts(oof: &[f64], true_sev: &[u8]) -> [f64; 4] {
    let mut sorted = oof.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let lo = sorted[0];
    let hi = sorted[n - 1];
    let gap = ((hi - lo) * 1e-3).max(1e-6);
    let mut c = [0.0; 4];
    for (k, ck) in c.iter_mut().enumerate() {
        let cum = true_sev.iter().filter(|&&s| s as usize <= k + 1).count();
        *ck = match cum {
            0 => lo,
            m if m >= n => hi + gap,
            m => 0.5 * (sorted[m - 1] + sorted[m]),
        };
    }
    if c[0] <= 0.0 {
        c[0] = gap;
    }
    for k in 1..4 {
        if c[k] <= c[k - 1] {
            c[k] = c[k - 1] + gap;
        }
    }
    c
}

/// Fits four cut points minimizing the chosen metric between true classes
/// and classes assigned from `oof`.
pub fn fit_cutpoints(
    oof: &[f64],
    true_sev: &[u8],
    regions: &[Region],
    opts: &CalibrationOpts,
) -> Result<FittedCuts> {
    let n = oof.len();
    if true_sev.len() != n || regions.len() != n {
        return Err(Error::invalid(
            "predictions, classes and regions differ in length",
        ));
    }
    if n < 5 {
        return Err(Error::invalid(format!(
            "calibration needs at least 5 rows, got {n}"
        )));
    }
    if let Some(p) = oof.iter().find(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("non-finite prediction {p}")));
    }
    if let Some(s) = true_sev.iter().find(|s| !(1..=5).contains(*s)) {
        return Err(Error::invalid(format!("severity {s} outside 1..5")));
    }
    if let Some(r) = Region::ALL.iter().find(|r| !regions.contains(r)) {
        return Err(Error::invalid(format!(
            "region {r} has no calibration rows"
        )));
    }
    if oof.iter().all(|&p| p == oof[0]) {
        return Err(Error::invalid(
            "all predictions are equal; cut points are undetermined",
        ));
    }
    let truth: Vec<f64> = true_sev.iter().map(|&s| s as f64).collect();
    let objective = |c: &[f64]| cut_objective(c, oof, &truth, regions, opts.metric);
    let x0 = initial_cuts(oof, true_sev);
    let mut nm = opts.nelder_mead.clone();
    nm.seeds.extend(opts.seeds.iter().map(|s| s.to_vec()));
    let res = nelder_mead(objective, &x0, &nm)?;
    let mut c = [0.0; 4];
    c.copy_from_slice(&res.x);
    c.sort_by(f64::total_cmp);
    let cuts =
        CutPoints::new(c).map_err(|_| Error::invalid("optimizer found no valid cut points"))?;
    Ok(FittedCuts {
        cuts,
        objective: res.fun,
        metric: opts.metric,
        clip_cap: opts.clip_cap,
    })
}
