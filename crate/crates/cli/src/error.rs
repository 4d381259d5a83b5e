use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}:{line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] diabnet::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1: usage or configuration, 2: data, 3: numeric failure.
    pub fn exit_code(&self) -> i32 {
        use diabnet::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Format { .. } | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Argument(_) => 1,
                E::Numeric { .. } => 3,
                _ => 2,
            },
        }
    }
}
