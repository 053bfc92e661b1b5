use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("gradient window mismatch: {0}")]
    WindowMismatch(String),

    #[error("parse error at record {record} (line {line}): {message}")]
    Parse {
        record: usize,
        line: usize,
        message: String,
    },

    #[error("infeasible coordination problem: {0}")]
    Infeasible(String),

    #[error("unknown client {0}")]
    UnknownClient(usize),

    #[error("{0}")]
    Invalid(String),

    #[error("probe refused: {0}")]
    ProbeRefused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
