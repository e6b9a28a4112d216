use std::fmt;

use thiserror::Error;

use crate::sparsify::ModelKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("delta must lie in (0, 1), got {0}")]
    DeltaOutOfRange(f64),

    #[error("bonus argument must be positive, got {0}")]
    NonPositiveBonusArgument(f64),

    #[error("instance too large for exhaustive enumeration: {policies:.3e} policies exceed {limit}")]
    InstanceTooLarge { policies: f64, limit: u64 },

    #[error("expected a {expected} model, got {found}")]
    WrongModelKind { expected: ModelKind, found: ModelKind },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("models were built from different known-edge sets")]
    EdgeSetMismatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("stage hash mismatch for {0}")]
    HashMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl fmt::Display) -> Self {
        Error::DimensionMismatch(msg.to_string())
    }

    /// Whether the error reflects bad input (as opposed to an I/O or runtime failure).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
