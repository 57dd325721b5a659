use std::path::PathBuf;

use crate::checkpoint::ModelCheckpoint;

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("architecture error: {0}")]
    Spec(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid hyperparameter: {0}")]
    Hyper(String),

    /// Carries a checkpoint of the epochs completed before the failure.
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (learning rate {learning_rate})")]
    NonFinite {
        epoch: usize,
        step: usize,
        learning_rate: f64,
        loss: f64,
        partial: Box<ModelCheckpoint>,
    },

    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },

    #[error("{path}: checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] gridpoint_core::Error),
}

impl NetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NetError::Io {
            path: path.into(),
            source,
        }
    }
}
