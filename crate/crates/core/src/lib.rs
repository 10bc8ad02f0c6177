//! Multi-source feature construction, tree ensembles and cut-point
//! calibration for algal-bloom severity estimation.
//!
//! Data flows from [`ingest`] (CSV tables and binary containers) through
//! [`featurize`] (45-column feature rows) into [`pipeline`], which trains the
//! [`trees`] ensembles under cross-validation, fuses their predictions, fits
//! severity cut points with [`calibrate`] and scores them with [`metrics`].

pub mod calibrate;
pub mod config;
pub mod error;
pub mod featurize;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod trees;

pub use calibrate::{
    apply_cuts, clip_severity, fit_cutpoints, nelder_mead, severity_from_cutpoints,
    CalibrationMetric, CalibrationOpts, CutPoints, FittedCuts, NelderMeadOpts, NelderMeadResult,
    REFERENCE_CUTS,
};
pub use config::{ModelKind, ModelSpec, RunConfig};
pub use error::{Error, Result};
pub use featurize::{
    build_feature_table, FeatureRow, FeatureTable, ImputationMode, FEATURE_NAMES, N_FEATURES,
};
pub use metrics::{accuracy_summary, confusion_matrix, ra_rmse, region_mean, rmse, EvalReport};
pub use model::{
    region_weight, target_transform, Fold, Label, PredictionSet, Region, SampleMeta, Split,
    TargetValue, WeightScheme, SENTINEL,
};
pub use pipeline::{
    assemble_training_data, ensemble_average, fit_model, kfold_split, load_feature_table,
    run_end_to_end, CsvLabels, FoldAssignment, LabelSource, RunArtifacts, TrainingData,
};
pub use trees::{FeatureImportance, Matrix, Model};
