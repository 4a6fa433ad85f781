//! Crate-level error type and process exit-code mapping.

use thiserror::Error;

/// Top-level error wrapping the per-subsystem error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Dti(#[from] crate::dti::DtiError),
    #[error(transparent)]
    Morphometry(#[from] crate::morphometry::MorphometryError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Internal(String),
}

impl Error {
    /// Process exit code: 1 for validation errors (bad inputs, malformed
    /// files, shape mismatches), 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Internal(_) => 2,
            Error::Model(crate::model::ModelError::NonFiniteLoss { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
