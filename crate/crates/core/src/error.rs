use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("input_gradient: target tensor does not participate in the output")]
    NotOnPath,

    #[error("{what}: non-finite value encountered")]
    NonFinite { what: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image format error: {msg}")]
    ImageFormat { path: PathBuf, msg: String },

    #[error("{path}:{line}: malformed manifest line: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint at byte offset {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Eval(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
