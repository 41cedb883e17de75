//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// More visible vehicles than observation slots; the episode cannot
    /// continue under the configured capacity.
    #[error("observation capacity exceeded: {n_real} visible vehicles, n_max = {n_max}")]
    Capacity { n_real: usize, n_max: usize },

    /// A NaN or infinity surfaced in the named tensor or computation.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The checkpoint was trained under a different scenario than the one
    /// it is being evaluated against.
    #[error(
        "scenario digest mismatch: checkpoint has {checkpoint}, requested scenario has {requested}"
    )]
    DigestMismatch { checkpoint: String, requested: String },

    #[error("training aborted at step {step}: {reason}")]
    Training { step: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
