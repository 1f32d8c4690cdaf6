use std::path::PathBuf;

use thiserror::Error;
use uwb_core::ConfigError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        HarnessError::Invalid(msg.into())
    }

    pub fn runtime(msg: impl std::fmt::Display) -> Self {
        HarnessError::Runtime(msg.to_string())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad configuration or input, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Invalid(_) => 2,
            HarnessError::Io { .. } | HarnessError::Runtime(_) => 3,
        }
    }
}
