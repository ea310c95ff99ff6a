//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

/// Errors surfaced by every layer of the crate.
///
/// Variants are grouped so the CLI can map them onto distinct exit codes:
/// config problems, data/input problems, and numeric failures are
/// distinguishable by scripts.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An op received tensors whose shapes do not fit its contract.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid run configuration (unknown key, bad value, failed invariant).
    #[error("config error: {0}")]
    Config(String),

    /// Missing or malformed input data (manifest, checkpoint, image file).
    #[error("data error: {0}")]
    Data(String),

    /// A numeric failure: non-finite loss, failed gradient check, empty softmax row.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Filesystem problem with the offending path attached.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 numeric,
    /// 1 everything else. 0 is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Shape { .. } => 4,
            Error::Io { .. } => 1,
        }
    }
}
