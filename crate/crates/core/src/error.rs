//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or sequence dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A structurally invalid configuration (bad head split, M > T, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (wrong token kind, non-unit feature rows, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values, divergence, or degenerate numerics.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A symbol outside the closed vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Input sequence exceeds a configured capacity.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
