use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A CSV record failed validation. `row` is 1-based and counts data rows
    /// only (the header is row 0).
    #[error("{file}: row {row}, field `{field}`: {message}")]
    Row {
        file: String,
        row: usize,
        field: String,
        message: String,
    },

    #[error("{file}: container error at byte {offset}: {message}")]
    Container {
        file: String,
        offset: usize,
        message: String,
    },

    #[error("dimension mismatch: expected {expected} columns, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("missing uid `{uid}` in {context}")]
    MissingUid { uid: String, context: String },

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// True for errors caused by bad user input (files, rows, config) as
    /// opposed to failures while a stage was running.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Stage { .. } => false,
            Error::InvalidInput(_)
            | Error::Row { .. }
            | Error::Container { .. }
            | Error::DimensionMismatch { .. }
            | Error::MissingUid { .. }
            | Error::Config(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Json(_) => true,
        }
    }
}
