//! Error taxonomy shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by kernels, model construction, data handling and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Two grids that must agree in extent (or channel count) do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input value is outside the operation's domain (non-finite field,
    /// out-of-range timestep, empty list, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates its invariant. The message starts with
    /// the offending field path, e.g. `loss.ncc_window: must be odd`.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem trouble, annotated with the path involved.
    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are not what we expect
    /// (bad magic, wrong version, truncated payload, malformed manifest).
    #[error("format error: {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
