use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GcmmError>;

/// Errors raised by the fitting, evaluation and I/O layers.
#[derive(Debug, Error)]
pub enum GcmmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("parse failure at row {row} col {col}: {message}")]
    Parse { row: usize, col: usize, message: String },

    #[error("non-finite at row {row} col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("ragged rows: row {row} has {found} columns, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed model payload: {0}")]
    Json(#[from] serde_json::Error),

    #[error("singular correlation matrix ({0}); consider a larger ridge")]
    Singular(String),

    #[error("non-finite log-likelihood at iteration {iteration}, component {component}")]
    NonFiniteLikelihood { iteration: usize, component: usize },

    #[error("k-means produced an empty cluster after {attempts} seedings")]
    EmptyCluster { attempts: usize },
}

impl GcmmError {
    /// Numerical failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GcmmError::Singular(_)
                | GcmmError::NonFiniteLikelihood { .. }
                | GcmmError::EmptyCluster { .. }
        )
    }
}
