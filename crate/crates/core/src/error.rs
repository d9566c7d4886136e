use std::path::PathBuf;

use bitadapt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Idx(#[from] crate::data::IdxError),
    #[error(transparent)]
    Checkpoint(#[from] crate::harness::CheckpointError),
    #[error("invalid bitwidth: {0}")]
    Bitwidth(String),
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("episode: {0}")]
    Episode(String),
    #[error("model: {0}")]
    Model(String),
    #[error("optimizer: {0}")]
    Optim(String),
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Lowers to a [`TensorError`] so library losses can run inside
    /// tensor-level closures such as gradient checks.
    pub fn into_tensor_error(self) -> TensorError {
        match self {
            Error::Tensor(t) => t,
            other => TensorError::InvalidArgument {
                op: "bitadapt",
                reason: other.to_string(),
            },
        }
    }
}
