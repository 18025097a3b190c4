use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}, column {column}: {message}")]
    Malformed {
        row: usize,
        column: String,
        message: String,
    },

    #[error("row {row}: implausible {fields}")]
    Implausible { row: usize, fields: String },

    #[error("conflicting readings for sensor {sensor} at {timestamp}")]
    Conflict { sensor: String, timestamp: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("unknown sensor {0}")]
    UnknownSensor(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("cannot place anomalies: {0}")]
    Placement(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("singular regression: {0}")]
    Singular(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("overlapping labels for sensor {0}")]
    OverlappingLabels(String),

    #[error("replay interrupted after {sent} records: {source}")]
    Replay { sent: usize, source: io::Error },

    #[error("gateway protocol: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
