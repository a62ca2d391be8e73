//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A state left the admissible region (non-finite or |X| above the
    /// divergence threshold) during integration.
    #[error("integration diverged at step {step}")]
    Divergence { step: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank-deficient design matrix")]
    RankDeficient,

    #[error("tape node budget exceeded: {budget} nodes")]
    TapeBudget { budget: usize },

    #[error("container format error: {0}")]
    Container(String),

    #[error("training aborted in epoch {epoch}: {skipped} of {total} batches diverged")]
    TrainingAborted {
        epoch: usize,
        skipped: usize,
        total: usize,
    },

    #[error("forecast aborted: {diverged} of {total} members diverged")]
    ForecastAborted { diverged: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
