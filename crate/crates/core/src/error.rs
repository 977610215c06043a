use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CatchError>;

#[derive(Debug, Error)]
pub enum CatchError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}, column '{column}': cannot parse '{value}' as a finite number")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: label value '{value}' is not 0 or 1")]
    BadLabel { row: usize, value: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("window size {window} exceeds series length {length}")]
    WindowTooLong { window: usize, length: usize },

    #[error("non-finite loss at {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown {kind} '{name}', expected one of: {valid}")]
    Unknown {
        kind: &'static str,
        name: String,
        valid: String,
    },
}

impl CatchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CatchError::Io {
            path: path.into(),
            source,
        }
    }
}
