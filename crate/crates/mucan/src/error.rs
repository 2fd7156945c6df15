//! Error type shared by all modules.

use thiserror::Error;

/// Unified error type for tensor ops, model assembly, and experiments.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An operation contract was violated (wrong candidate count,
    /// non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    /// The gradient-check evaluation point sits within the tie tolerance of
    /// a selection boundary; the check must be re-run with a fresh seed.
    #[error("evaluation point too close to a selection tie (seed {seed}); retry with a new seed")]
    RetryWithNewSeed { seed: u64 },

    /// Weights or config file I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed weights file.
    #[error("weights format error: {0}")]
    WeightsFormat(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
