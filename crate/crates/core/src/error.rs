use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulation, dataset and attack layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid challenge: {0}")]
    InvalidChallenge(String),

    #[error("invalid feature vector: {0}")]
    InvalidFeatureVector(String),

    #[error("invalid PUF description: {0}")]
    InvalidPuf(String),

    #[error("requested {requested} neighbors but only {available} exist at distance {distance}")]
    NeighborBudget {
        requested: u64,
        available: u64,
        distance: usize,
    },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("optimizer aborted: {0}")]
    Optimizer(String),

    #[error("malformed file {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn malformed(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
