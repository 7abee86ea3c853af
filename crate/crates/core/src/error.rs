use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
    #[error("norm layout mismatch at entry {index}: expected {expected}, got {found}")]
    LayoutMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("{0}")]
    Format(String),
    #[error("truncated input at byte offset {offset} while reading {what}")]
    Truncated { offset: usize, what: String },
    #[error("checkpoint was written in mode `{found}`, expected `{expected}`")]
    ModeMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step}; last telemetry: {diagnostic}")]
    NonFiniteLoss { step: u64, diagnostic: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
