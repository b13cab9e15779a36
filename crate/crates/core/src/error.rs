//! Shared error type for the whole crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error. The CLI maps `Numerical`/`NonFinite` to exit code 2 and
/// everything else to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {details}")]
    Dimension { op: &'static str, details: String },

    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },

    #[error("numerical error in {op}: {details}")]
    Numerical { op: &'static str, details: String },

    /// Non-finite value produced inside a model pass; carries the layer index.
    #[error("numerical error: non-finite value at layer {layer} ({site})")]
    NonFinite { layer: usize, site: String },

    #[error("construction error: {0}")]
    Construction(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error in {path}: {details}")]
    Format { path: PathBuf, details: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension { op, details: details.into() }
    }

    pub fn domain(op: &'static str, details: impl Into<String>) -> Self {
        Error::Domain { op, details: details.into() }
    }

    pub fn numerical(op: &'static str, details: impl Into<String>) -> Self {
        Error::Numerical { op, details: details.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures that the CLI reports with exit code 2.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
