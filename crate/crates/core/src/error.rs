//! Error taxonomy shared by the whole crate.
//!
//! The variants mirror the failure classes of the module contracts: shape
//! mismatches name the offending axes, contract violations describe the
//! broken precondition, index errors carry the bad value and bound, format
//! errors report what was actually observed in the byte stream, and I/O
//! errors always name the path involved.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// An index (e.g. a class label) fell outside its valid range.
    #[error("index error: {0}")]
    Index(String),

    /// A byte stream did not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A payload was shorter or longer than its header promised.
    #[error("length error: {0}")]
    Length(String),

    /// Architecture spec inconsistency (e.g. flatten size vs declared fan-in).
    #[error("spec error: {0}")]
    Spec(String),

    /// Filesystem failure, always carrying the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
