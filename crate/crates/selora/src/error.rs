//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two matrices had incompatible shapes for an operation.
    #[error("{op}: shape mismatch between {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A dimension or count was out of its valid range.
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    /// An API was called outside its contract (empty batch, foreign tape node, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Rank expansion was refused because the adapter is at its cap.
    #[error("layer {layer_id}: expansion refused, rank {rank} is at the configured cap")]
    RankCapReached { layer_id: String, rank: usize },

    /// A configuration file failed validation. `path` is the JSON key path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {details}")]
    NonFiniteLoss { step: u64, details: String },

    /// A checkpoint did not match the adapter it was applied to.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code under the CLI contract: 1 for configuration/user errors,
    /// 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } => 2,
            _ => 1,
        }
    }
}
