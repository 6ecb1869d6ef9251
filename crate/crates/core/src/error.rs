use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    OutOfVocab { id: usize, size: usize },

    #[error("sequence length {len} exceeds maximum window length {max} (raise window/padding in the config)")]
    WindowTooLong { len: usize, max: usize },

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("loss must be a scalar, found shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown label {label:?} in dialogue {dialogue:?}")]
    UnknownLabel { label: String, dialogue: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parameter {name}: checkpoint has shape {found:?}, requested configuration expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
