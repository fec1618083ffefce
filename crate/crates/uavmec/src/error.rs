use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Core(#[from] uavmec_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("missing checkpoint for {what}: expected {path}")]
    MissingCheckpoint { what: String, path: PathBuf },
    #[error("constraint audit failed: {0}")]
    Audit(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("malformed record in {path} line {line}: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl HarnessError {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        HarnessError::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for configuration and other errors, 2 for audit
    /// or validation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Audit(_) | HarnessError::Validation(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
