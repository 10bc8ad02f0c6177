//! INI run configuration.
//!
//! ```ini
//! [paths]
//! metadata = metadata.csv
//! labels = labels.csv
//! features = features.csv      ; or patches/climate/dem to featurize first
//! external = nn_a.csv, nn_b.csv
//! out_dir = run
//!
//! [run]
//! seed = 1
//! folds = 5
//! stratify = false
//! imputation = off
//!
//! [model.rf]
//! kind = forest
//! weights = uniform
//!
//! [model.gbdt]
//! kind = gbdt
//! weights = gbdt
//! select_features_from = rf
//!
//! [calibration]
//! metric = ra_rmse
//! clip_cap = 4
//! ```
//!
//! Relative paths resolve against the config file's directory. Unknown
//! sections and keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::{Ini, Properties};
use serde::Serialize;

use crate::calibrate::{CalibrationMetric, CalibrationOpts, NelderMeadOpts, REFERENCE_CUTS};
use crate::error::{Error, Result};
use crate::featurize::ImputationMode;
use crate::model::WeightScheme;
use crate::trees::{ForestParams, GbdtParams, MaxFeatures, DEFAULT_IMPORTANCE_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Forest(ForestParams),
    Gbdt(GbdtParams),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub id: String,
    pub kind: ModelKind,
    pub weights: WeightScheme,
    /// Restrict this model to the columns whose fold-averaged importance in
    /// the named forest exceeds `importance_threshold`.
    pub select_features_from: Option<String>,
    pub importance_threshold: f64,
}

impl ModelSpec {
    pub fn forest(id: &str, params: ForestParams) -> Self {
        ModelSpec {
            id: id.into(),
            kind: ModelKind::Forest(params),
            weights: WeightScheme::Uniform,
            select_features_from: None,
            importance_threshold: DEFAULT_IMPORTANCE_THRESHOLD,
        }
    }

    pub fn gbdt(id: &str, params: GbdtParams) -> Self {
        ModelSpec {
            id: id.into(),
            kind: ModelKind::Gbdt(params),
            weights: WeightScheme::Gbdt,
            select_features_from: None,
            importance_threshold: DEFAULT_IMPORTANCE_THRESHOLD,
        }
    }
}

/// Raw inputs for building the feature table inside the run.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FeatureSources {
    pub patches: Option<PathBuf>,
    pub climate: Option<PathBuf>,
    pub dem: Option<PathBuf>,
}

impl FeatureSources {
    pub fn is_empty(&self) -> bool {
        self.patches.is_none() && self.climate.is_none() && self.dem.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationConfig {
    pub metric: CalibrationMetric,
    pub max_iter: usize,
    pub xatol: f64,
    pub fatol: f64,
    pub seed_reference: bool,
    pub clip_cap: u8,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let nm = NelderMeadOpts::default();
        CalibrationConfig {
            metric: CalibrationMetric::RaRmse,
            max_iter: nm.max_iter,
            xatol: nm.xatol,
            fatol: nm.fatol,
            seed_reference: true,
            clip_cap: crate::calibrate::DEFAULT_CLIP_CAP,
        }
    }
}

impl CalibrationConfig {
    pub fn opts(&self) -> CalibrationOpts {
        CalibrationOpts {
            metric: self.metric,
            nelder_mead: NelderMeadOpts {
                max_iter: self.max_iter,
                xatol: self.xatol,
                fatol: self.fatol,
                ..Default::default()
            },
            seeds: if self.seed_reference {
                vec![REFERENCE_CUTS]
            } else {
                Vec::new()
            },
            clip_cap: self.clip_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub metadata: PathBuf,
    pub labels: PathBuf,
    pub features: Option<PathBuf>,
    pub sources: FeatureSources,
    pub external: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub folds: usize,
    pub stratify: bool,
    #[serde(serialize_with = "ser_imputation")]
    pub imputation: ImputationMode,
    pub roster: Vec<ModelSpec>,
    pub calibration: CalibrationConfig,
}

fn ser_imputation<S: serde::Serializer>(
    m: &ImputationMode,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(match m {
        ImputationMode::Off => "off",
        ImputationMode::On => "on",
    })
}

impl RunConfig {
    /// RF on uniform weights plus GBDT on the GBDT region weights, using
    /// the features selected by the RF.
    pub fn default_roster() -> Vec<ModelSpec> {
        let rf = ModelSpec::forest("rf", ForestParams::default());
        let mut gbdt = ModelSpec::gbdt("gbdt", GbdtParams::default());
        gbdt.select_features_from = Some("rf".into());
        vec![rf, gbdt]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_ini_str(&text, base)
    }

    pub fn from_ini_str(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };

        let mut roster = Vec::new();
        let mut have_paths = false;
        let mut cfg = RunConfig {
            metadata: PathBuf::new(),
            labels: PathBuf::new(),
            features: None,
            sources: FeatureSources::default(),
            external: Vec::new(),
            out_dir: base.join("run"),
            seed: 1,
            folds: 5,
            stratify: false,
            imputation: ImputationMode::Off,
            roster: Vec::new(),
            calibration: CalibrationConfig::default(),
        };

        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("keys outside of a section".into()));
                }
                continue;
            };
            let mut s = Section::new(name, props);
            match name {
                "paths" => {
                    have_paths = true;
                    cfg.metadata = resolve(s.required("metadata")?);
                    cfg.labels = resolve(s.required("labels")?);
                    cfg.features = s.take("features").map(resolve);
                    cfg.sources.patches = s.take("patches").map(resolve);
                    cfg.sources.climate = s.take("climate").map(resolve);
                    cfg.sources.dem = s.take("dem").map(resolve);
                    if let Some(ext) = s.take("external") {
                        cfg.external = ext
                            .split(',')
                            .map(str::trim)
                            .filter(|p| !p.is_empty())
                            .map(resolve)
                            .collect();
                    }
                    if let Some(out) = s.take("out_dir") {
                        cfg.out_dir = resolve(out);
                    }
                }
                "run" => {
                    cfg.seed = s.parse_or("seed", cfg.seed)?;
                    cfg.folds = s.parse_or("folds", cfg.folds)?;
                    cfg.stratify = s.parse_or("stratify", cfg.stratify)?;
                    if let Some(v) = s.take("imputation") {
                        cfg.imputation = match v.trim().to_ascii_lowercase().as_str() {
                            "on" | "true" => ImputationMode::On,
                            "off" | "false" => ImputationMode::Off,
                            other => return Err(s.bad("imputation", other, "expected on or off")),
                        };
                    }
                }
                "calibration" => {
                    let c = &mut cfg.calibration;
                    if let Some(m) = s.take("metric") {
                        c.metric = m.parse()?;
                    }
                    c.max_iter = s.parse_or("max_iter", c.max_iter)?;
                    c.xatol = s.parse_or("xatol", c.xatol)?;
                    c.fatol = s.parse_or("fatol", c.fatol)?;
                    c.seed_reference = s.parse_or("seed_reference", c.seed_reference)?;
                    c.clip_cap = s.parse_or("clip_cap", c.clip_cap)?;
                    if !(1..=5).contains(&c.clip_cap) {
                        return Err(Error::Config(format!(
                            "clip_cap must be 1..5, got {}",
                            c.clip_cap
                        )));
                    }
                }
                _ => match name.strip_prefix("model.") {
                    Some(id) if !id.is_empty() => roster.push(parse_model(id, &mut s)?),
                    _ => return Err(Error::Config(format!("unknown section [{name}]"))),
                },
            }
            s.finish()?;
        }
        if !have_paths {
            return Err(Error::Config("missing [paths] section".into()));
        }
        cfg.roster = if roster.is_empty() {
            Self::default_roster()
        } else {
            roster
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.roster.is_empty() {
            return Err(Error::Config("model roster is empty".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        if self.features.is_none() && self.sources.is_empty() {
            return Err(Error::Config(
                "[paths] needs `features` or at least one of `patches`, `climate`, `dem`".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, m) in self.roster.iter().enumerate() {
            if !seen.insert(m.id.as_str()) {
                return Err(Error::Config(format!("duplicate model id `{}`", m.id)));
            }
            if let Some(src) = &m.select_features_from {
                let ok = self.roster[..i]
                    .iter()
                    .any(|o| &o.id == src && matches!(o.kind, ModelKind::Forest(_)));
                if !ok {
                    return Err(Error::Config(format!(
                        "model `{}` selects features from `{src}`, which is not a forest listed before it",
                        m.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every input path must exist before any work starts.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths: Vec<&Path> = vec![&self.metadata, &self.labels];
        paths.extend(self.features.as_deref().filter(|_| self.sources.is_empty()));
        paths.extend(self.sources.patches.as_deref());
        paths.extend(self.sources.climate.as_deref());
        paths.extend(self.sources.dem.as_deref());
        paths.extend(self.external.iter().map(PathBuf::as_path));
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "input file not found: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

fn parse_model(id: &str, s: &mut Section) -> Result<ModelSpec> {
    let kind = s.required("kind")?.trim().to_ascii_lowercase();
    let mut spec = match kind.as_str() {
        "forest" | "rf" => {
            let d = ForestParams::default();
            let max_features =
                match s.take("max_features") {
                    None => d.max_features,
                    Some(v) => match v.trim() {
                        "all" => MaxFeatures::All,
                        "third" => MaxFeatures::Third,
                        n => MaxFeatures::Count(n.parse().map_err(|_| {
                            s.bad("max_features", n, "expected all, third or a count")
                        })?),
                    },
                };
            ModelSpec::forest(
                id,
                ForestParams {
                    n_estimators: s.parse_or("n_estimators", d.n_estimators)?,
                    max_features,
                    min_samples_leaf: s.parse_or("min_samples_leaf", d.min_samples_leaf)?,
                    bootstrap: s.parse_or("bootstrap", d.bootstrap)?,
                },
            )
        }
        "gbdt" => {
            let d = GbdtParams::default();
            ModelSpec::gbdt(
                id,
                GbdtParams {
                    rounds: s.parse_or("rounds", d.rounds)?,
                    learning_rate: s.parse_or("learning_rate", d.learning_rate)?,
                    num_leaves: s.parse_or("num_leaves", d.num_leaves)?,
                    bagging_fraction: s.parse_or("bagging_fraction", d.bagging_fraction)?,
                    bagging_freq: s.parse_or("bagging_freq", d.bagging_freq)?,
                    subsample: s.parse_or("subsample", d.subsample)?,
                    min_samples_leaf: s.parse_or("min_samples_leaf", d.min_samples_leaf)?,
                },
            )
        }
        other => return Err(s.bad("kind", other, "expected forest or gbdt")),
    };
    if let Some(w) = s.take("weights") {
        spec.weights = w
            .parse()
            .map_err(|e: Error| Error::Config(format!("[{}] weights: {e}", s.name)))?;
    }
    spec.select_features_from = s.take("select_features_from").map(|v| v.trim().to_string());
    spec.importance_threshold = s.parse_or("importance_threshold", spec.importance_threshold)?;
    if spec.importance_threshold.is_nan() || spec.importance_threshold < 0.0 {
        return Err(Error::Config(format!(
            "[{}] importance_threshold must be >= 0",
            s.name
        )));
    }
    Ok(spec)
}

/// Section reader that remembers which keys were consumed.
struct Section<'a> {
    name: &'a str,
    props: &'a Properties,
    used: BTreeSet<&'a str>,
}

impl<'a> Section<'a> {
    fn new(name: &'a str, props: &'a Properties) -> Self {
        Section {
            name,
            props,
            used: BTreeSet::new(),
        }
    }

    fn take(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.insert(key);
        self.props.get(key)
    }

    fn required(&mut self, key: &'a str) -> Result<&'a str> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("[{}] missing `{key}`", self.name)))
    }

    fn parse_or<T: FromStr>(&mut self, key: &'a str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| self.bad(key, v, "cannot parse value")),
        }
    }

    fn bad(&self, key: &str, value: &str, why: &str) -> Error {
        Error::Config(format!("[{}] {key} = `{value}`: {why}", self.name))
    }

    fn finish(self) -> Result<()> {
        for (k, _) in self.props.iter() {
            if !self.used.contains(k) {
                return Err(Error::Config(format!("[{}] unknown key `{k}`", self.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "
[paths]
metadata = meta.csv
labels = labels.csv
features = feats.csv
external = a.csv, /abs/b.csv
out_dir = out

[run]
seed = 9
folds = 4
stratify = true
imputation = on

[model.forest1]
kind = forest
n_estimators = 10
max_features = all

[model.boost]
kind = gbdt
weights = nn
rounds = 50
select_features_from = forest1
importance_threshold = 0.01

[calibration]
metric = rmse
clip_cap = 5
seed_reference = false
";

    #[test]
    fn parses_full_config() {
        let c = RunConfig::from_ini_str(FULL, Path::new("/base")).unwrap();
        assert_eq!(c.metadata, PathBuf::from("/base/meta.csv"));
        assert_eq!(
            c.external,
            vec![PathBuf::from("/base/a.csv"), PathBuf::from("/abs/b.csv")]
        );
        assert_eq!((c.seed, c.folds, c.stratify), (9, 4, true));
        assert_eq!(c.imputation, ImputationMode::On);
        assert_eq!(c.roster.len(), 2);
        assert_eq!(
            c.roster[0].kind,
            ModelKind::Forest(ForestParams {
                n_estimators: 10,
                max_features: MaxFeatures::All,
                ..Default::default()
            })
        );
        assert_eq!(c.roster[1].weights, WeightScheme::Nn);
        assert_eq!(c.roster[1].select_features_from.as_deref(), Some("forest1"));
        assert_eq!(c.calibration.metric, CalibrationMetric::Rmse);
        assert!(c.calibration.opts().seeds.is_empty());
        assert!(serde_json::to_string(&c)
            .unwrap()
            .contains("\"imputation\":\"on\""));
    }

    #[test]
    fn defaults_apply() {
        let c = RunConfig::from_ini_str(
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\n",
            Path::new("b"),
        )
        .unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.folds, 5);
        assert_eq!(c.roster, RunConfig::default_roster());
        assert_eq!(c.out_dir, PathBuf::from("b/run"));
        assert_eq!(c.calibration.clip_cap, 4);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new(".");
        for bad in [
            "[run]\nseed=1\n",
            "[paths]\nmetadata=m\nfeatures=f\n",
            "[paths]\nmetadata=m\nlabels=l\n",
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\nbogus=1\n",
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\n[extra]\n",
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\n[run]\nseed=x\n",
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\n[model.a]\nkind=svm\n",
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\n[model.a]\nkind=gbdt\nselect_features_from=b\n",
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\n[calibration]\nclip_cap=0\n",
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\n[run]\nfolds=1\n",
        ] {
            let e = RunConfig::from_ini_str(bad, base).unwrap_err();
            assert!(e.is_input_error(), "{bad}: {e}");
        }
    }

    #[test]
    fn missing_inputs_are_reported() {
        let c = RunConfig::from_ini_str(
            "[paths]\nmetadata=m\nlabels=l\nfeatures=f\n",
            Path::new("/nonexistent"),
        )
        .unwrap();
        let e = c.check_paths().unwrap_err();
        assert!(e.to_string().contains("not found"));
    }
}
