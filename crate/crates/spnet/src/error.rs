//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unregistered switch {requested}; registered switches: {registered}")]
    UnregisteredSwitch { requested: String, registered: String },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("internal invariant violation: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage (handled by the CLI parser), 2 data/config,
    /// 3 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Format(_)
            | Error::Io { .. }
            | Error::InvalidArg(_)
            | Error::UnregisteredSwitch { .. }
            | Error::MissingTensor(_) => 2,
            Error::Shape(_) | Error::Internal(_) => 3,
        }
    }
}
