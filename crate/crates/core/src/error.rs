use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = StegoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StegoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl StegoError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line harness.
    ///
    /// 0 is success, 2 a usage or contract violation, 3 an I/O failure and
    /// 4 a numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::InvalidArgument(_) | Self::Parse(_) | Self::Config(_) | Self::Usage(_) => 2,
            Self::Io { .. } | Self::Image { .. } | Self::Checkpoint(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}
