//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid inputs: dimension mismatches, bad probability tables,
    /// incompatible integration rules, malformed configs.
    #[error("validation: {0}")]
    Validation(String),

    /// A requested quantity is not computable on the given instance
    /// (rank-deficient systems, indefinite matrices, failed solves).
    #[error("computation: {0}")]
    Computation(String),

    /// Proxy tables too degenerate for a bridge function to exist.
    #[error("bridge existence not guaranteed: {0}")]
    BridgeExistence(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }
}
