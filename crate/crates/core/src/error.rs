use std::path::PathBuf;

/// Errors produced by every layer of the toolkit.
///
/// Variants are grouped by failure class so the CLI can map each class to
/// a distinct exit code (see [`Error::class`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("data error in {item}: {message}")]
    Data { item: String, message: String },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport {
        message: String,
        attempts: usize,
        attempt_log: Vec<String>,
    },

    #[error("protocol error: {message}")]
    Protocol { message: String, raw: String },

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("setup error: {0}")]
    Setup(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

/// Coarse failure class, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Transport,
    Resource,
    Verification,
    Other,
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Validation(_) | Error::Precondition(_) | Error::Data { .. } => {
                ErrorClass::Validation
            }
            Error::Transport { .. } | Error::Protocol { .. } => ErrorClass::Transport,
            Error::Resource(_) => ErrorClass::Resource,
            Error::Verification(_) => ErrorClass::Verification,
            Error::Setup(_) | Error::Io { .. } | Error::Serde(_) => ErrorClass::Other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
