//! `hab` command-line driver.
//!
//! Exit codes: 0 on success, 2 for input or validation errors, 3 when a
//! stage fails while running. `HAB_THREADS` caps the worker count (0 or
//! unset means one per core).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use hab_core::calibrate::{apply_cuts, fit_cutpoints, CalibrationOpts, FittedCuts};
use hab_core::featurize::{build_feature_table, FeatureTable, ImputationMode, FEATURE_NAMES};
use hab_core::ingest::{
    parse_labels, parse_predictions, parse_severities, predictions_to_csv, read_climate_container,
    read_dem_container, read_labels_csv, read_metadata_csv, read_patch_container,
};
use hab_core::metrics::evaluate;
use hab_core::pipeline::{
    assemble_training_data, fit_model, load_feature_table, run_end_to_end, sha256_hex,
    ArtifactWriter, CsvLabels,
};
use hab_core::trees::{select_features, Matrix, Model};
use hab_core::{CalibrationMetric, Error, Fold, Label, PredictionSet, Result, RunConfig, SENTINEL};

#[derive(Parser)]
#[command(
    name = "hab",
    version,
    about = "Algal-bloom severity estimation from fused remote-sensing features"
)]
struct Cli {
    /// Seed for every random draw; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Build the 45-column feature table from metadata and containers.
    Featurize {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long)]
        climate: Option<PathBuf>,
        #[arg(long)]
        dem: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "off")]
        impute: OnOff,
    },
    /// Fit one roster model on every training row and save it.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Roster model id; defaults to the first model.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the rows of a feature table with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit severity cut points on out-of-fold predictions.
    Calibrate {
        /// Prediction CSV (uid,fold,prediction); only out-of-fold rows are used.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "ra_rmse")]
        metric: String,
        #[arg(long, default_value_t = 4)]
        clip_cap: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score severity predictions against labels.
    Evaluate {
        /// Severity CSV (uid,severity), or a prediction CSV together with --cuts.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        cuts: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Cross-validate the roster, fuse, calibrate and evaluate.
    RunAll {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        Error::Config(format!(
            "HAB_THREADS must be a non-negative integer, got `{v}`"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize {
            metadata,
            patches,
            climate,
            dem,
            out,
            impute,
        } => featurize(&metadata, patches, climate, dem, &out, impute),
        Command::Train { config, model, out } => train(&config, model.as_deref(), &out, cli.seed),
        Command::Predict {
            model,
            features,
            out,
        } => predict(&model, &features, &out),
        Command::Calibrate {
            pred,
            labels,
            metric,
            clip_cap,
            out,
        } => calibrate(&pred, &labels, &metric, clip_cap, &out),
        Command::Evaluate {
            pred,
            labels,
            cuts,
            json,
        } => evaluate_cmd(&pred, &labels, cuts.as_deref(), json.as_deref()),
        Command::RunAll { config } => run_all(&config, cli.seed),
    }
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Writes `bytes` to `out` and a sibling manifest with its hash and the
/// hashes of the inputs.
fn write_with_manifest(
    out: &Path,
    bytes: &[u8],
    command: &str,
    inputs: &[&Path],
    extra: serde_json::Value,
) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out, bytes).map_err(|e| Error::io(out, e))?;
    let mut input_hashes = BTreeMap::new();
    for p in inputs {
        input_hashes.insert(p.display().to_string(), hash_file(p)?);
    }
    let m = json!({
        "command": command,
        "file": out.file_name().map(|s| s.to_string_lossy().into_owned()),
        "sha256": sha256_hex(bytes),
        "inputs": input_hashes,
        "details": extra,
    });
    let mp = manifest_path(out);
    fs::write(&mp, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&mp, e))
}

fn featurize(
    metadata: &Path,
    patches: Option<PathBuf>,
    climate: Option<PathBuf>,
    dem: Option<PathBuf>,
    out: &Path,
    impute: OnOff,
) -> Result<()> {
    let metas = read_metadata_csv(metadata)?;
    let p = patches.as_deref().map(read_patch_container).transpose()?;
    let c = climate.as_deref().map(read_climate_container).transpose()?;
    let d = dem.as_deref().map(read_dem_container).transpose()?;
    for (name, given) in [
        ("patches", p.is_some()),
        ("climate", c.is_some()),
        ("dem", d.is_some()),
    ] {
        if !given {
            eprintln!("warning: no {name} container given; its columns are set to {SENTINEL}");
        }
    }
    let mode = match impute {
        OnOff::On => ImputationMode::On,
        OnOff::Off => ImputationMode::Off,
    };
    let table = build_feature_table(&metas, p.as_ref(), c.as_ref(), d.as_ref(), mode)?;

    let mut w = ArtifactWriter::new(out)?;
    w.write("features.csv", table.to_csv().as_bytes())?;
    w.write("features.bin", &table.to_binary())?;
    let mut inputs = BTreeMap::new();
    for path in [
        Some(metadata),
        patches.as_deref(),
        climate.as_deref(),
        dem.as_deref(),
    ]
    .into_iter()
    .flatten()
    {
        inputs.insert(path.display().to_string(), hash_file(path)?);
    }
    let missing: BTreeMap<&str, usize> = FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(j, n)| (*n, table.rows.iter().filter(|r| r.0[j] == SENTINEL).count()))
        .filter(|(_, c)| *c > 0)
        .collect();
    w.finish(&json!({
        "command": "featurize",
        "rows": table.len(),
        "imputation": matches!(mode, ImputationMode::On),
        "inputs": inputs,
        "missing_per_column": missing,
    }))?;

    println!("rows: {}", table.len());
    println!("columns: {}", FEATURE_NAMES.len() + 1);
    println!("missing values: {}", table.sentinel_count());
    for (name, count) in &missing {
        println!("  {name}: {count}");
    }
    Ok(())
}

fn train(config: &Path, model_id: Option<&str>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.check_paths()?;
    let spec = match model_id {
        None => cfg.roster[0].clone(),
        Some(id) => cfg
            .roster
            .iter()
            .find(|m| m.id == id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no model `{id}` in the roster")))?,
    };
    let metas = read_metadata_csv(&cfg.metadata)?;
    let (table, _) = load_feature_table(&cfg, &metas)?;
    let data = assemble_training_data(&metas, &table, &CsvLabels(cfg.labels.clone()))?;

    let columns: Vec<usize> = match &spec.select_features_from {
        None => (0..data.x.n_cols()).collect(),
        Some(src) => {
            let src_spec = cfg.roster.iter().find(|m| &m.id == src).expect("validated");
            let m = fit_model(src_spec, &data.x, &data.y, &data.regions, cfg.seed)
                .map_err(|e| e.in_stage("train"))?;
            let cols = select_features(&m.feature_importance(), spec.importance_threshold);
            if cols.is_empty() {
                (0..data.x.n_cols()).collect()
            } else {
                cols
            }
        }
    };
    let x = data.x.select_columns(&columns)?;
    let model =
        fit_model(&spec, &x, &data.y, &data.regions, cfg.seed).map_err(|e| e.in_stage("train"))?;
    let bytes = model.to_bytes()?;
    let names: Vec<&str> = columns.iter().map(|&c| FEATURE_NAMES[c]).collect();
    write_with_manifest(
        out,
        &bytes,
        "train",
        &[config, &cfg.metadata, &cfg.labels],
        json!({ "model": spec.id, "seed": cfg.seed, "n_train": data.train_uids.len(), "columns": names }),
    )?;
    println!(
        "trained `{}` on {} rows, {} columns -> {}",
        spec.id,
        data.train_uids.len(),
        columns.len(),
        out.display()
    );
    Ok(())
}

/// Column names a saved model was trained on, from its manifest.
fn model_columns(model_path: &Path) -> Result<Vec<usize>> {
    let mp = manifest_path(model_path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let names = v["details"]["columns"]
        .as_array()
        .ok_or_else(|| Error::invalid(format!("{}: no column list", mp.display())))?;
    names
        .iter()
        .map(|n| {
            let n = n.as_str().unwrap_or_default();
            FEATURE_NAMES
                .iter()
                .position(|f| *f == n)
                .ok_or_else(|| Error::invalid(format!("{}: unknown column `{n}`", mp.display())))
        })
        .collect()
}

fn predict(model_path: &Path, features: &Path, out: &Path) -> Result<()> {
    let model = Model::load(model_path)?;
    let columns = model_columns(model_path)?;
    let table = FeatureTable::read_csv(features)?;
    let rows: Vec<&[f64]> = table.rows.iter().map(|r| &r.0[..]).collect();
    let x = Matrix::from_rows(&rows)?.select_columns(&columns)?;
    let preds = model.predict(&x)?;
    let id = model_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut set = PredictionSet::new(id);
    for (uid, v) in table.uids.iter().zip(preds) {
        set.insert(uid, Fold::Test, v)?;
    }
    write_with_manifest(
        out,
        predictions_to_csv(&set).as_bytes(),
        "predict",
        &[model_path, features],
        json!({}),
    )?;
    println!("predicted {} rows -> {}", table.len(), out.display());
    Ok(())
}

fn read_prediction_file(path: &Path) -> Result<PredictionSet> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(f, &path.display().to_string(), "pred")
}

fn calibrate(pred: &Path, labels: &Path, metric: &str, clip_cap: u8, out: &Path) -> Result<()> {
    let metric: CalibrationMetric = metric.parse()?;
    if !(1..=5).contains(&clip_cap) {
        return Err(Error::Config(format!(
            "clip cap must be 1..5, got {clip_cap}"
        )));
    }
    let set = read_prediction_file(pred)?;
    if set.oof.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no out-of-fold rows",
            pred.display()
        )));
    }
    let wanted: HashSet<&str> = set.oof.keys().map(String::as_str).collect();
    let f = fs::File::open(labels).map_err(|e| Error::io(labels, e))?;
    let keep = |u: &str| wanted.contains(u);
    let by_uid: HashMap<String, Label> =
        parse_labels(f, &labels.display().to_string(), Some(&keep))?
            .into_iter()
            .map(|l| (l.uid.clone(), l))
            .collect();
    let mut oof = Vec::new();
    let mut sev = Vec::new();
    let mut regions = Vec::new();
    for (uid, &(_, v)) in &set.oof {
        let l = by_uid.get(uid).ok_or_else(|| Error::MissingUid {
            uid: uid.clone(),
            context: labels.display().to_string(),
        })?;
        oof.push(v);
        sev.push(l.severity);
        regions.push(l.region);
    }
    let opts = CalibrationOpts {
        metric,
        clip_cap,
        ..Default::default()
    };
    let fit = fit_cutpoints(&oof, &sev, &regions, &opts)?;
    write_with_manifest(
        out,
        fit.to_json()?.as_bytes(),
        "calibrate",
        &[pred, labels],
        json!({}),
    )?;
    println!("cuts: {:?}", fit.cuts.values());
    println!("objective ({}): {:.6}", fit.metric, fit.objective);
    Ok(())
}

fn evaluate_cmd(
    pred: &Path,
    labels: &Path,
    cuts: Option<&Path>,
    json_out: Option<&Path>,
) -> Result<()> {
    let head = fs::read_to_string(pred).map_err(|e| Error::io(pred, e))?;
    let pairs: Vec<(String, u8)> = if head
        .lines()
        .next()
        .is_some_and(|h| h.contains("prediction"))
    {
        let cuts_path =
            cuts.ok_or_else(|| Error::Config("a prediction CSV needs --cuts".into()))?;
        let fit = FittedCuts::read(cuts_path)?;
        let set = read_prediction_file(pred)?;
        let values: Vec<f64> = set.oof.values().map(|&(_, v)| v).collect();
        let sev = apply_cuts(&values, &fit.cuts, fit.clip_cap);
        set.oof.keys().cloned().zip(sev).collect()
    } else {
        parse_severities(head.as_bytes(), &pred.display().to_string())?
    };
    let by_uid: HashMap<String, Label> = read_labels_csv(labels)?
        .into_iter()
        .map(|l| (l.uid.clone(), l))
        .collect();
    let mut truth = Vec::with_capacity(pairs.len());
    let mut predicted = Vec::with_capacity(pairs.len());
    let mut regions = Vec::with_capacity(pairs.len());
    for (uid, s) in &pairs {
        let l = by_uid.get(uid).ok_or_else(|| Error::MissingUid {
            uid: uid.clone(),
            context: labels.display().to_string(),
        })?;
        truth.push(l.severity);
        predicted.push(*s);
        regions.push(l.region);
    }
    let report = evaluate(&truth, &predicted, &regions)?;
    print!("{}", report.table("pred"));
    println!();
    println!("confusion (rows = true 1..5, columns = predicted 1..5)");
    for row in &report.confusion {
        println!(
            "{}",
            row.iter().map(|v| format!("{v:>7}")).collect::<String>()
        );
    }
    println!("accuracy overall: {:.3}", report.accuracy_overall);
    match report.accuracy_severe {
        Some(a) => println!("accuracy severe: {a:.3}"),
        None => println!("accuracy severe: n/a"),
    }
    if let Some(p) = json_out {
        write_with_manifest(
            p,
            report.to_json()?.as_bytes(),
            "evaluate",
            &[pred, labels],
            json!({}),
        )?;
    }
    Ok(())
}

fn run_all(config: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let art = run_end_to_end(&cfg, &CsvLabels(cfg.labels.clone()))?;
    print!("{}", art.report.table("fused"));
    println!("cuts: {:?}", art.cuts.cuts.values());
    println!("accuracy overall: {:.3}", art.report.accuracy_overall);
    if let Some(a) = art.report.accuracy_severe {
        println!("accuracy severe: {a:.3}");
    }
    for (model, cols) in &art.selected_features {
        println!("{model}: {} selected features", cols.len());
    }
    println!("artifacts: {}", art.out_dir.display());
    Ok(())
}
