use std::path::PathBuf;

use mmdg_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmdgError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),
    #[error("config parse error: {0}")]
    Toml(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MmdgError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> MmdgError {
    let path = path.into();
    move |source| MmdgError::Io { path, source }
}
