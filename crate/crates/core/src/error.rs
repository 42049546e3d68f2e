//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("unknown trajectory kind `{0}` (expected figure8, circle or square)")]
    UnknownTrajectory(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("regressor is rank-deficient; use a Tikhonov regularization > 0")]
    RankDeficient,

    #[error("Riccati iteration did not converge within {max_iter} iterations (last step {delta:.3e})")]
    RiccatiNoConvergence { max_iter: usize, delta: f64 },

    #[error("Riccati solution is not stabilizing (closed-loop spectral radius {rho:.6})")]
    NotStabilizing { rho: f64 },

    #[error("backward called without a recorded forward pass")]
    BackwardWithoutForward,

    #[error("config error: {0}")]
    Config(String),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
