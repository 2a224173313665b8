use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error at {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("{0}")]
    Core(#[from] nmrl::Error),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A run finished but at least one analysis was rejected.
    #[error("analysis rejected: {0}")]
    Rejected(String),

    #[error("integrity check failed for {path}: {msg}")]
    Integrity { path: String, msg: String },
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_REJECTED: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl CliError {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use nmrl::Error as E;
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Core(E::Config { .. } | E::Json(_)) => EXIT_CONFIG,
            CliError::Core(E::Io(_)) | CliError::Io { .. } | CliError::Integrity { .. } => EXIT_IO,
            CliError::Core(_) | CliError::Rejected(_) => EXIT_REJECTED,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
