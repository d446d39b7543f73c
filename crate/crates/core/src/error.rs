use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain {domain_id} has {available} samples but {requested} were requested")]
    InsufficientSamples {
        domain_id: u32,
        available: usize,
        requested: usize,
    },

    #[error("unknown domain id {0}")]
    UnknownDomain(u32),

    #[error("non-finite value in {context}: {diagnostic}")]
    NonFinite { context: String, diagnostic: String },

    #[error("privacy audit violation: {0}")]
    AuditViolation(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined metric: {0}")]
    Undefined(&'static str),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable category, used by the CLI error JSON and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::UnknownDomain(_) => "unknown_domain",
            Error::NonFinite { .. } => "non_finite",
            Error::AuditViolation(_) => "audit_violation",
            Error::Empty(_) => "empty",
            Error::Undefined(_) => "undefined",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
