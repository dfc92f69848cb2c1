//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Spatial geometry cannot be satisfied (zero-size output, stride mismatch, ...).
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Input outside an op's mathematical domain (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),
    /// backward() was already run on this tape; build a fresh tape per pass.
    #[error("tape already consumed by backward; record a new tape for another pass")]
    TapeConsumed,
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
