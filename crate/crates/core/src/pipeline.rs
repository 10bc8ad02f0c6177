//! Cross-validated training, prediction fusion, calibration and evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::calibrate::{apply_cuts, fit_cutpoints, FittedCuts};
use crate::config::{ModelKind, ModelSpec, RunConfig};
use crate::error::{Error, Result};
use crate::featurize::{build_feature_table, FeatureTable, FEATURE_NAMES};
use crate::ingest::{
    parse_labels, predictions_to_csv, read_climate_container, read_dem_container,
    read_external_predictions, read_metadata_csv, read_patch_container, severities_to_csv,
};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{
    region_weight, target_transform, Fold, Label, PredictionSet, Region, SampleMeta, Split,
};
use crate::trees::{fit_forest, fit_gbdt, select_features, FeatureImportance, Matrix, Model};

/// Fold id of every training row, aligned with the uid list it was built
/// from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldAssignment {
    pub folds: Vec<u8>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// Row indices held out in fold `f`, ascending.
    pub fn held_out(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] as usize == f)
            .collect()
    }

    /// Row indices trained on in fold `f`, ascending.
    pub fn training(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] as usize != f)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k)
            .map(|f| self.folds.iter().filter(|&&g| g as usize == f).count())
            .collect()
    }
}

/// Shuffles row positions with a seeded ChaCha8 generator and deals them
/// round-robin into `k` folds. With `strata`, each stratum is shuffled and
/// dealt in turn while the round-robin counter carries over, so fold sizes
/// still differ by at most one.
pub fn kfold_split(
    n: usize,
    k: usize,
    seed: u64,
    strata: Option<&[Region]>,
) -> Result<FoldAssignment> {
    if k < 2 || k > u8::MAX as usize {
        return Err(Error::invalid(format!(
            "fold count must be in 2..=255, got {k}"
        )));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} rows cannot fill {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match strata {
        None => vec![(0..n).collect()],
        Some(s) => {
            if s.len() != n {
                return Err(Error::invalid("strata and rows differ in length"));
            }
            Region::ALL
                .iter()
                .map(|r| (0..n).filter(|&i| s[i] == *r).collect())
                .collect()
        }
    };
    let mut folds = vec![0u8; n];
    let mut next = 0usize;
    for mut g in groups {
        g.shuffle(&mut rng);
        for i in g {
            folds[i] = (next % k) as u8;
            next += 1;
        }
    }
    Ok(FoldAssignment { folds, k, seed })
}

/// Training inputs shared by every roster model.
pub struct CvData<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
    pub regions: &'a [Region],
    pub uids: &'a [String],
    pub x_test: &'a Matrix,
    pub test_uids: &'a [String],
    pub folds: &'a FoldAssignment,
}

#[derive(Debug, Clone)]
pub struct CvOutput {
    pub predictions: PredictionSet,
    /// Importance of each fold model, indexed by the columns it was trained on.
    pub importances: Vec<FeatureImportance>,
    pub columns: Vec<usize>,
}

impl CvOutput {
    /// Fold-averaged importance expanded back to `d` columns.
    pub fn mean_importance(&self, d: usize) -> Result<FeatureImportance> {
        let mean = FeatureImportance::mean(&self.importances)?;
        let mut full = vec![0.0; d];
        for (v, &c) in mean.0.iter().zip(&self.columns) {
            full[c] = *v;
        }
        Ok(FeatureImportance(full))
    }
}

pub(crate) fn fold_seed(seed: u64, model: usize, fold: usize) -> u64 {
    seed.wrapping_add(((model as u64) << 40) | ((fold as u64) << 32))
}

/// Trains one model per fold on the other folds with region weights,
/// predicts the held-out rows and the test rows, and averages the test
/// predictions over folds. `columns` restricts the feature columns.
pub fn run_model_cv(
    spec: &ModelSpec,
    model_index: usize,
    data: &CvData<'_>,
    columns: Option<&[usize]>,
    seed: u64,
) -> Result<CvOutput> {
    let d = data.x.n_cols();
    let columns: Vec<usize> = columns.map_or_else(|| (0..d).collect(), <[usize]>::to_vec);
    let x = data.x.select_columns(&columns)?;
    let x_test = data.x_test.select_columns(&columns)?;
    let k = data.folds.k;

    // (held-out rows, their predictions, test predictions, importance)
    type FoldResult = (Vec<usize>, Vec<f64>, Vec<f64>, FeatureImportance);
    let per_fold: Vec<FoldResult> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train = data.folds.training(f);
            let held = data.folds.held_out(f);
            let xt = x.select_rows(&train);
            let yt: Vec<f64> = train.iter().map(|&i| data.y[i]).collect();
            let rt: Vec<Region> = train.iter().map(|&i| data.regions[i]).collect();
            let model = fit_model(spec, &xt, &yt, &rt, fold_seed(seed, model_index, f))?;
            let oof = model.predict(&x.select_rows(&held))?;
            let test = model.predict(&x_test)?;
            Ok((held, oof, test, model.feature_importance()))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::invalid(format!("model `{}`: {e}", spec.id)))?;

    let mut oof = vec![f64::NAN; data.uids.len()];
    let mut test = vec![0.0; data.test_uids.len()];
    let mut importances = Vec::with_capacity(k);
    for (held, p, t, imp) in per_fold {
        for (i, v) in held.into_iter().zip(p) {
            oof[i] = v;
        }
        for (a, b) in test.iter_mut().zip(t) {
            *a += b;
        }
        importances.push(imp);
    }
    let mut predictions = PredictionSet::new(spec.id.clone());
    for (i, uid) in data.uids.iter().enumerate() {
        predictions.insert(uid, Fold::Oof(data.folds.folds[i]), oof[i])?;
    }
    for (uid, v) in data.test_uids.iter().zip(test) {
        predictions.insert(uid, Fold::Test, v / k as f64)?;
    }
    Ok(CvOutput {
        predictions,
        importances,
        columns,
    })
}

/// Per-uid unweighted mean over sets with identical uid coverage. Order and
/// fold ids follow the first set.
pub fn ensemble_average(sets: &[PredictionSet], model_id: &str) -> Result<PredictionSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("no prediction sets to average"))?;
    for s in &sets[1..] {
        let missing = |a: &PredictionSet, b: &PredictionSet| {
            a.oof
                .keys()
                .find(|u| !b.oof.contains_key(*u))
                .map(|u| (u.clone(), "oof"))
                .or_else(|| {
                    a.test
                        .keys()
                        .find(|u| !b.test.contains_key(*u))
                        .map(|u| (u.clone(), "test"))
                })
        };
        if let Some((uid, part)) = missing(first, s) {
            return Err(Error::MissingUid {
                uid,
                context: format!("{part} predictions of `{}`", s.model_id),
            });
        }
        if let Some((uid, part)) = missing(s, first) {
            return Err(Error::MissingUid {
                uid,
                context: format!("{part} predictions of `{}`", first.model_id),
            });
        }
    }
    let n = sets.len() as f64;
    let mut out = PredictionSet::new(model_id);
    for (uid, &(fold, _)) in &first.oof {
        let v = sets.iter().map(|s| s.oof[uid].1).sum::<f64>() / n;
        out.insert(uid, Fold::Oof(fold), v)?;
    }
    for uid in first.test.keys() {
        let v = sets.iter().map(|s| s.test[uid]).sum::<f64>() / n;
        out.insert(uid, Fold::Test, v)?;
    }
    Ok(out)
}

/// Source of training labels. Implementations must not interpret rows that
/// `keep` rejects.
pub trait LabelSource {
    fn labels(&self, keep: &dyn Fn(&str) -> bool) -> Result<Vec<Label>>;
}

pub struct CsvLabels(pub PathBuf);

impl LabelSource for CsvLabels {
    fn labels(&self, keep: &dyn Fn(&str) -> bool) -> Result<Vec<Label>> {
        let f = fs::File::open(&self.0).map_err(|e| Error::io(&self.0, e))?;
        let name = self.0.display().to_string();
        parse_labels(f, &name, Some(keep))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files written under one directory, with their SHA-256 recorded for the
/// manifest.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
            hashes: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.hashes.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn hashes(&self) -> &BTreeMap<String, String> {
        &self.hashes
    }

    /// Writes `manifest.json` holding `body` plus the artifact hashes.
    pub fn finish<T: Serialize>(self, body: &T) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(body)?;
        if let serde_json::Value::Object(m) = &mut v {
            m.insert("artifacts".into(), serde_json::to_value(&self.hashes)?);
        }
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&v)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(v)
    }
}

#[derive(Debug, Clone, Serialize)]
struct RunManifest<'a> {
    seed: u64,
    config: &'a RunConfig,
    n_train: usize,
    n_test: usize,
    fold_sizes: Vec<usize>,
    selected_features: BTreeMap<String, Vec<&'static str>>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub models: Vec<PredictionSet>,
    pub fused: PredictionSet,
    pub cuts: FittedCuts,
    pub oof_severity: Vec<(String, u8)>,
    pub test_severity: Vec<(String, u8)>,
    pub report: EvalReport,
    pub selected_features: BTreeMap<String, Vec<usize>>,
    pub manifest: serde_json::Value,
}

fn staging_dir(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_else(|| "run".into());
    name.push(".partial");
    out.with_file_name(name)
}

/// Runs the whole flow and writes every artifact under `config.out_dir`.
/// Work happens in a sibling staging directory that replaces the output
/// directory only on success; on failure it is removed.
pub fn run_end_to_end(config: &RunConfig, labels: &dyn LabelSource) -> Result<RunArtifacts> {
    config.validate()?;
    config.check_paths()?;
    let out = &config.out_dir;
    if out.exists()
        && !out.join("manifest.json").exists()
        && fs::read_dir(out).map_or(true, |mut d| d.next().is_some())
    {
        return Err(Error::Config(format!(
            "output directory {} exists and is not a previous run",
            out.display()
        )));
    }
    let staging = staging_dir(out);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    match run_staged(config, labels, &staging) {
        Ok(mut art) => {
            if out.exists() {
                fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
            }
            fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
            art.out_dir = out.clone();
            Ok(art)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

/// Training and test rows of one run, aligned with the metadata order.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train_uids: Vec<String>,
    pub test_uids: Vec<String>,
    pub x: Matrix,
    pub x_test: Matrix,
    /// Square-root density targets.
    pub y: Vec<f64>,
    pub regions: Vec<Region>,
    pub severity: Vec<u8>,
}

/// Reads the feature table named by the config, or builds it from the
/// configured containers. The flag tells whether it was built.
pub fn load_feature_table(
    config: &RunConfig,
    metas: &[SampleMeta],
) -> Result<(FeatureTable, bool)> {
    if config.sources.is_empty() {
        let path = config
            .features
            .as_ref()
            .ok_or_else(|| Error::Config("no feature table configured".into()))?;
        return Ok((FeatureTable::read_csv(path)?, false));
    }
    let s = &config.sources;
    let patches = s.patches.as_deref().map(read_patch_container).transpose()?;
    let climate = s
        .climate
        .as_deref()
        .map(read_climate_container)
        .transpose()?;
    let dem = s.dem.as_deref().map(read_dem_container).transpose()?;
    let t = build_feature_table(
        metas,
        patches.as_ref(),
        climate.as_ref(),
        dem.as_ref(),
        config.imputation,
    )
    .map_err(|e| e.in_stage("featurize"))?;
    Ok((t, true))
}

/// Splits rows by metadata split and attaches labels to the training rows.
/// Labels are requested for training uids only.
pub fn assemble_training_data(
    metas: &[SampleMeta],
    table: &FeatureTable,
    labels: &dyn LabelSource,
) -> Result<TrainingData> {
    let row_of: HashMap<&str, usize> = table
        .uids
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();
    let mut train_uids = Vec::new();
    let mut test_uids = Vec::new();
    for m in metas {
        if !row_of.contains_key(m.uid.as_str()) {
            return Err(Error::MissingUid {
                uid: m.uid.clone(),
                context: "feature table".into(),
            });
        }
        match m.split {
            Split::Train => train_uids.push(m.uid.clone()),
            Split::Test => test_uids.push(m.uid.clone()),
        }
    }

    let train_set: HashSet<&str> = train_uids.iter().map(String::as_str).collect();
    let keep = |u: &str| train_set.contains(u);
    let by_uid: HashMap<String, Label> = labels
        .labels(&keep)?
        .into_iter()
        .map(|l| (l.uid.clone(), l))
        .collect();
    let mut y = Vec::with_capacity(train_uids.len());
    let mut regions = Vec::with_capacity(train_uids.len());
    let mut severity = Vec::with_capacity(train_uids.len());
    for uid in &train_uids {
        let l = by_uid.get(uid).ok_or_else(|| Error::MissingUid {
            uid: uid.clone(),
            context: "labels".into(),
        })?;
        y.push(target_transform(l.density)?.value());
        regions.push(l.region);
        severity.push(l.severity);
    }
    if let Some(r) = Region::ALL.iter().find(|r| !regions.contains(r)) {
        return Err(Error::invalid(format!("no training rows in region {r}")));
    }

    let rows = |uids: &[String]| -> Result<Matrix> {
        if uids.is_empty() {
            return Matrix::new(Vec::new(), 0, table.rows.first().map_or(0, |r| r.0.len()));
        }
        let r: Vec<&[f64]> = uids
            .iter()
            .map(|u| &table.rows[row_of[u.as_str()]].0[..])
            .collect();
        Matrix::from_rows(&r)
    };
    Ok(TrainingData {
        x: rows(&train_uids)?,
        x_test: rows(&test_uids)?,
        train_uids,
        test_uids,
        y,
        regions,
        severity,
    })
}

/// Fits one roster model on all rows of `x` with its region weights.
pub fn fit_model(
    spec: &ModelSpec,
    x: &Matrix,
    y: &[f64],
    regions: &[Region],
    seed: u64,
) -> Result<Model> {
    let w: Vec<f64> = regions
        .iter()
        .map(|&r| region_weight(r, spec.weights))
        .collect();
    Ok(match &spec.kind {
        ModelKind::Forest(p) => Model::Forest(fit_forest(x, y, &w, p, seed)?),
        ModelKind::Gbdt(p) => Model::Gbdt(fit_gbdt(x, y, &w, p, seed)?),
    })
}

fn run_staged(config: &RunConfig, labels: &dyn LabelSource, dir: &Path) -> Result<RunArtifacts> {
    let mut w = ArtifactWriter::new(dir)?;

    let metas = read_metadata_csv(&config.metadata)?;
    let (table, built) = load_feature_table(config, &metas)?;
    if built {
        w.write("features.csv", table.to_csv().as_bytes())?;
    }
    let TrainingData {
        train_uids,
        test_uids,
        x,
        x_test,
        y,
        regions,
        severity,
    } = assemble_training_data(&metas, &table, labels)?;
    let folds = kfold_split(
        train_uids.len(),
        config.folds,
        config.seed,
        config.stratify.then_some(regions.as_slice()),
    )?;
    let data = CvData {
        x: &x,
        y: &y,
        regions: &regions,
        uids: &train_uids,
        x_test: &x_test,
        test_uids: &test_uids,
        folds: &folds,
    };

    // models that others select features from run first; the rest follow in
    // roster order
    let mut outputs: Vec<Option<CvOutput>> = vec![None; config.roster.len()];
    let mut selected = BTreeMap::new();
    for (i, spec) in config.roster.iter().enumerate() {
        let columns = match &spec.select_features_from {
            None => None,
            Some(src) => {
                let j = config
                    .roster
                    .iter()
                    .position(|m| &m.id == src)
                    .expect("validated");
                let imp = outputs[j]
                    .as_ref()
                    .expect("source trained first")
                    .mean_importance(x.n_cols())?;
                let mut cols = select_features(&imp, spec.importance_threshold);
                if cols.is_empty() {
                    cols = (0..x.n_cols()).collect();
                }
                selected.insert(spec.id.clone(), cols.clone());
                Some(cols)
            }
        };
        let o = run_model_cv(spec, i, &data, columns.as_deref(), config.seed)
            .map_err(|e| e.in_stage("train"))?;
        outputs[i] = Some(o);
    }
    let mut models: Vec<PredictionSet> = outputs
        .into_iter()
        .map(|o| o.expect("trained").predictions)
        .collect();
    for p in &config.external {
        models.push(read_external_predictions(p)?);
    }
    for m in &models {
        w.write(
            &format!("predictions/{}.csv", m.model_id),
            predictions_to_csv(m).as_bytes(),
        )?;
    }

    let fused = ensemble_average(&models, "fused").map_err(|e| e.in_stage("fuse"))?;
    w.write(
        "predictions/fused.csv",
        predictions_to_csv(&fused).as_bytes(),
    )?;

    let oof: Vec<f64> = train_uids.iter().map(|u| fused.oof[u].1).collect();
    let cuts = fit_cutpoints(&oof, &severity, &regions, &config.calibration.opts())
        .map_err(|e| e.in_stage("calibrate"))?;
    w.write("cuts.json", cuts.to_json()?.as_bytes())?;

    let oof_sev = apply_cuts(&oof, &cuts.cuts, cuts.clip_cap);
    let test_pred: Vec<f64> = test_uids.iter().map(|u| fused.test[u]).collect();
    let test_sev = apply_cuts(&test_pred, &cuts.cuts, cuts.clip_cap);
    let pair = |u: &[String], s: &[u8]| -> Vec<(String, u8)> {
        u.iter().cloned().zip(s.iter().copied()).collect()
    };
    let oof_severity = pair(&train_uids, &oof_sev);
    let test_severity = pair(&test_uids, &test_sev);
    w.write(
        "severity_oof.csv",
        severities_to_csv(oof_severity.iter().map(|(u, s)| (u.as_str(), *s))).as_bytes(),
    )?;
    w.write(
        "severity_test.csv",
        severities_to_csv(test_severity.iter().map(|(u, s)| (u.as_str(), *s))).as_bytes(),
    )?;

    let report = evaluate(&severity, &oof_sev, &regions).map_err(|e| e.in_stage("evaluate"))?;
    w.write("report.json", report.to_json()?.as_bytes())?;

    let manifest = w.finish(&RunManifest {
        seed: config.seed,
        config,
        n_train: train_uids.len(),
        n_test: test_uids.len(),
        fold_sizes: folds.sizes(),
        selected_features: selected
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|&c| FEATURE_NAMES[c]).collect()))
            .collect(),
    })?;

    Ok(RunArtifacts {
        out_dir: dir.to_path_buf(),
        models,
        fused,
        cuts,
        oof_severity,
        test_severity,
        report,
        selected_features: selected,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_sizes() {
        let a = kfold_split(10, 5, 3, None).unwrap();
        assert_eq!(a.sizes(), vec![2; 5]);
        let mut s = kfold_split(11, 5, 3, None).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(
            kfold_split(11, 5, 3, None).unwrap(),
            kfold_split(11, 5, 3, None).unwrap()
        );
        assert_ne!(
            kfold_split(40, 5, 3, None).unwrap(),
            kfold_split(40, 5, 4, None).unwrap()
        );
        assert!(kfold_split(4, 5, 0, None).is_err());
    }

    #[test]
    fn stratified_folds_stay_balanced() {
        let regions: Vec<Region> = (0..23).map(|i| Region::ALL[(i * i) % 4]).collect();
        let a = kfold_split(23, 5, 1, Some(&regions)).unwrap();
        let s = a.sizes();
        assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
        for f in 0..5 {
            let mut both: Vec<usize> = a.held_out(f).into_iter().chain(a.training(f)).collect();
            both.sort();
            assert_eq!(both, (0..23).collect::<Vec<_>>());
        }
    }

    fn set(id: &str, vals: &[(&str, f64)], test: &[(&str, f64)]) -> PredictionSet {
        let mut p = PredictionSet::new(id);
        for (u, v) in vals {
            p.insert(u, Fold::Oof(0), *v).unwrap();
        }
        for (u, v) in test {
            p.insert(u, Fold::Test, *v).unwrap();
        }
        p
    }

    #[test]
    fn averaging() {
        let a = set("a", &[("x", 100.0)], &[("t", 1.0)]);
        let b = set("b", &[("x", 300.0)], &[("t", 3.0)]);
        let f = ensemble_average(&[a.clone(), b], "f").unwrap();
        assert_eq!(f.oof_value("x"), Some(200.0));
        assert_eq!(f.test_value("t"), Some(2.0));
        let id = ensemble_average(std::slice::from_ref(&a), "a").unwrap();
        assert_eq!(id, a);
        let c = set("c", &[("y", 1.0)], &[("t", 1.0)]);
        match ensemble_average(&[a, c], "f") {
            Err(Error::MissingUid { uid, .. }) => assert_eq!(uid, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn three_way_mean_matches_manual() {
        let rf = set("rf", &[("a", 1.5), ("b", 2.25), ("c", 7.0)], &[]);
        let gb = set("gb", &[("a", 0.5), ("b", 4.0), ("c", 1.0)], &[]);
        let nn = set("nn", &[("a", 3.0), ("b", 0.0), ("c", 2.5)], &[]);
        let f = ensemble_average(&[rf.clone(), gb.clone(), nn.clone()], "f").unwrap();
        for u in ["a", "b", "c"] {
            let manual =
                (rf.oof_value(u).unwrap() + gb.oof_value(u).unwrap() + nn.oof_value(u).unwrap())
                    / 3.0;
            assert!((f.oof_value(u).unwrap() - manual).abs() < 1e-12);
        }
    }

    fn cv_fixture(n: usize, m: usize) -> (Matrix, Matrix, Vec<String>, Vec<String>, Vec<Region>) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let test: Vec<Vec<f64>> = (0..m).map(|i| vec![i as f64 * 1.5, 1.0]).collect();
        (
            Matrix::from_rows(&rows).unwrap(),
            Matrix::from_rows(&test).unwrap(),
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..m).map(|i| format!("t{i}")).collect(),
            (0..n).map(|i| Region::ALL[i % 4]).collect(),
        )
    }

    #[test]
    fn constant_target_cv() {
        let (x, xt, uids, tuids, regions) = cv_fixture(20, 4);
        let folds = kfold_split(20, 5, 0, None).unwrap();
        let y = vec![7.0; 20];
        let data = CvData {
            x: &x,
            y: &y,
            regions: &regions,
            uids: &uids,
            x_test: &xt,
            test_uids: &tuids,
            folds: &folds,
        };
        for spec in RunConfig::default_roster() {
            let mut spec = spec;
            spec.kind = match spec.kind {
                ModelKind::Forest(mut p) => {
                    p.n_estimators = 5;
                    ModelKind::Forest(p)
                }
                ModelKind::Gbdt(mut p) => {
                    p.rounds = 5;
                    ModelKind::Gbdt(p)
                }
            };
            let o = run_model_cv(&spec, 0, &data, None, 1).unwrap();
            assert_eq!(o.predictions.oof.len(), 20);
            assert!(o
                .predictions
                .oof
                .values()
                .all(|&(_, v)| (v - 7.0).abs() < 1e-12));
            assert!(o
                .predictions
                .test
                .values()
                .all(|&v| (v - 7.0).abs() < 1e-12));
        }
    }

    #[test]
    fn test_prediction_is_fold_mean() {
        let (x, xt, uids, tuids, regions) = cv_fixture(25, 3);
        let folds = kfold_split(25, 5, 2, None).unwrap();
        let y: Vec<f64> = (0..25).map(|i| (i as f64).sqrt()).collect();
        let data = CvData {
            x: &x,
            y: &y,
            regions: &regions,
            uids: &uids,
            x_test: &xt,
            test_uids: &tuids,
            folds: &folds,
        };
        let spec = ModelSpec::forest(
            "rf",
            crate::trees::ForestParams {
                n_estimators: 4,
                ..Default::default()
            },
        );
        let o = run_model_cv(&spec, 0, &data, None, 5).unwrap();
        let mut manual = [0.0; 3];
        for f in 0..5 {
            let train = folds.training(f);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let wt = vec![1.0; train.len()];
            let p = match &spec.kind {
                ModelKind::Forest(p) => p,
                _ => unreachable!(),
            };
            let m = fit_forest(&x.select_rows(&train), &yt, &wt, p, fold_seed(5, 0, f)).unwrap();
            for (a, b) in manual.iter_mut().zip(m.predict(&xt).unwrap()) {
                *a += b / 5.0;
            }
        }
        for (i, u) in tuids.iter().enumerate() {
            assert!((o.predictions.test_value(u).unwrap() - manual[i]).abs() < 1e-12);
        }
        let covered: HashSet<&String> = o.predictions.oof.keys().collect();
        assert_eq!(covered.len(), 25);
    }
}
