use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the underflow threshold")]
    NormUnderflow { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient in {block}")]
    NonFiniteGradient { block: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("activation cache does not match the network or gradient shape")]
    StaleCache,

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training failed at iteration {iteration}: {source}")]
    AtIteration {
        iteration: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// The innermost error, unwrapping iteration context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }

    /// Broad classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self.root() {
            Error::InvalidConfig(_)
            | Error::DimensionMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::InsufficientSamples(_)
            | Error::InsufficientPairs(_) => ErrorKind::Config,
            Error::NormUnderflow { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFinite(_)
            | Error::StaleCache
            | Error::AtIteration { .. } => ErrorKind::Numerical,
            Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
