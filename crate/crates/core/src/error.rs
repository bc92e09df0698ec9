use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Input data violates a documented invariant (shape, dimension, range).
    #[error("invalid data: {0}")]
    Data(String),

    /// A frame-specific data error; carries the offending frame id.
    #[error("frame {frame}: {message}")]
    Frame { frame: u32, message: String },

    /// Binary format errors (bad magic, unsupported version, truncation).
    #[error("format error in {what}: {message}")]
    Format { what: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn frame(frame: u32, message: impl Into<String>) -> Self {
        Error::Frame {
            frame,
            message: message.into(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }
}
