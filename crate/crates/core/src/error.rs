use std::path::PathBuf;

use crate::ndgrad::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("assignment: {0}")]
    Assignment(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
