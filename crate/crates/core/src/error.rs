use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor argument has the wrong extent along a named axis.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        found: String,
    },

    #[error("{op}: index {index} out of range 0..{len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    /// Caller violated an API precondition (non-scalar root, etc).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown action unit {0}")]
    UnknownAu(String),

    #[error("{method} requires a gap-linear head")]
    UnsupportedHead { method: String },

    #[error("{path}:{line}: {msg}")]
    Data {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Dataset(String),

    #[error("non-finite loss at epoch {epoch}, sample {sample}: {value}")]
    NonFinite {
        epoch: usize,
        sample: usize,
        value: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for command-line front ends:
    /// 1 data, 2 configuration, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data { .. } | Error::Dataset(_) | Error::Io { .. } => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
