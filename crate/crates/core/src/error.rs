use std::path::PathBuf;

/// Errors raised across the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("vocabulary mismatch: {0}")]
    Vocab(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("estimated tape memory {needed} bytes exceeds budget {budget} bytes")]
    OutOfMemory { needed: u64, budget: u64 },

    #[error("training aborted at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 usage, 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Vocab(_) | Error::Json(_) | Error::Io { .. } => 2,
            Error::Checkpoint(_) => 2,
            Error::Shape(_) | Error::NonFinite(_) | Error::OutOfMemory { .. } | Error::Diverged { .. } => 3,
        }
    }
}
