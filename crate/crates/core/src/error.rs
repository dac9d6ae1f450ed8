//! Error type shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Unsupported or malformed file content.
    #[error("format error: {0}")]
    Format(String),

    /// Shape or size mismatch between arrays/images.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Argument outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Empty or unusable image corpus.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Invalid configuration file or value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint container.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
