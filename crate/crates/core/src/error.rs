use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Every variant maps to a short, stable category string (see [`Error::category`])
/// which the command-line driver prints so that failures are machine-parsable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: u64 },

    #[error("refusing to overwrite existing output {0} (pass --force)")]
    Exists(PathBuf),

    #[error("interrupted at step {0}")]
    Interrupted(u64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::Shape { .. } => "shape",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Stage(_) => "stage",
            Error::NonFinite { .. } => "non-finite",
            Error::Exists(_) => "exists",
            Error::Interrupted(_) => "interrupted",
        }
    }
}
