use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected a tensor of order {expected}, got order {actual}")]
    OrderMismatch { expected: usize, actual: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Format(#[from] FormatError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while decoding the on-disk containers. Each variant is a distinct
/// condition so callers (and the CLI) can tell them apart.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"CORA\"")]
    BadMagic,

    #[error("unsupported format version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("checksum mismatch: file is corrupted")]
    Integrity,

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("expected a {expected} file, found {found}")]
    WrongKind { expected: String, found: String },

    #[error("layer shapes do not compose: {0}")]
    Composition(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
