use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("attack: {0}")]
    Attack(String),
    #[error("non-finite training loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("experiment state: {0}")]
    State(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than usage or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
