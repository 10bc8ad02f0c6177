//! Domain types shared across the crate: samples, regions, labels, targets
//! and per-model prediction sets.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Missing or non-finite feature values are stored as this exact value.
pub const SENTINEL: f64 = -999.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    West,
    Midwest,
    South,
    Northeast,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::West,
        Region::Midwest,
        Region::South,
        Region::Northeast,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::West => "west",
            Region::Midwest => "midwest",
            Region::South => "south",
            Region::Northeast => "northeast",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "west" => Ok(Region::West),
            "midwest" => Ok(Region::Midwest),
            "south" => Ok(Region::South),
            "northeast" => Ok(Region::Northeast),
            other => Err(Error::invalid(format!("unknown region `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One sampling event.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub uid: String,
    pub latitude: f64,
    pub longitude: f64,
    pub date: NaiveDate,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub uid: String,
    pub region: Region,
    pub severity: u8,
    pub density: f64,
}

/// Model target on the square-root density axis.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TargetValue(f64);

impl TargetValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn target_transform(density: f64) -> Result<TargetValue> {
    if !density.is_finite() || density < 0.0 {
        return Err(Error::invalid(format!(
            "density must be finite and non-negative, got {density}"
        )));
    }
    Ok(TargetValue(density.sqrt()))
}

/// Per-region sample weighting used during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// 1.0 for every region (random forest).
    Uniform,
    Gbdt,
    /// Weights of the neural-network leg, kept so that external predictions
    /// can be reproduced.
    Nn,
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" | "rf" | "forest" => Ok(WeightScheme::Uniform),
            "gbdt" => Ok(WeightScheme::Gbdt),
            "nn" => Ok(WeightScheme::Nn),
            other => Err(Error::invalid(format!("unknown weight scheme `{other}`"))),
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::Gbdt => "gbdt",
            WeightScheme::Nn => "nn",
        })
    }
}

pub fn region_weight(region: Region, scheme: WeightScheme) -> f64 {
    match (scheme, region) {
        (WeightScheme::Uniform, _) => 1.0,
        (WeightScheme::Gbdt, Region::Midwest) => 1.51,
        (WeightScheme::Gbdt, Region::Northeast) => 1.98,
        (WeightScheme::Gbdt, Region::South) => 1.11,
        (WeightScheme::Gbdt, Region::West) => 1.3,
        (WeightScheme::Nn, Region::Midwest) => 0.86,
        (WeightScheme::Nn, Region::Northeast) => 1.12,
        (WeightScheme::Nn, Region::South) => 0.58,
        (WeightScheme::Nn, Region::West) => 0.71,
    }
}

/// Where a prediction came from: the held-out part of a CV fold, or the
/// averaged test-set prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fold {
    Oof(u8),
    Test,
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fold::Oof(k) => write!(f, "{k}"),
            Fold::Test => f.write_str("test"),
        }
    }
}

impl FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("test") {
            return Ok(Fold::Test);
        }
        match s.parse::<u8>() {
            Ok(k) if k <= 4 => Ok(Fold::Oof(k)),
            _ => Err(Error::invalid(format!(
                "fold must be 0..4 or `test`, got `{s}`"
            ))),
        }
    }
}

/// Continuous predictions of one model, keyed by uid in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub model_id: String,
    /// Out-of-fold predictions: uid -> (fold, value).
    pub oof: IndexMap<String, (u8, f64)>,
    pub test: IndexMap<String, f64>,
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>) -> Self {
        PredictionSet {
            model_id: model_id.into(),
            ..Default::default()
        }
    }

    /// Inserts one prediction, rejecting non-finite values and a uid that is
    /// already present in the same collection.
    pub fn insert(&mut self, uid: &str, fold: Fold, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite prediction {value} for uid `{uid}`"
            )));
        }
        let dup = match fold {
            Fold::Oof(k) => self.oof.insert(uid.to_string(), (k, value)).is_some(),
            Fold::Test => self.test.insert(uid.to_string(), value).is_some(),
        };
        if dup {
            return Err(Error::invalid(format!(
                "duplicate prediction for uid `{uid}` ({})",
                match fold {
                    Fold::Oof(_) => "oof",
                    Fold::Test => "test",
                }
            )));
        }
        Ok(())
    }

    pub fn oof_value(&self, uid: &str) -> Option<f64> {
        self.oof.get(uid).map(|&(_, v)| v)
    }

    pub fn test_value(&self, uid: &str) -> Option<f64> {
        self.test.get(uid).copied()
    }
}
