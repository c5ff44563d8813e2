use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// A configuration or hyper-parameter is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported image file.
    #[error("image error in {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    /// Checkpoint magic, version, header or array mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
