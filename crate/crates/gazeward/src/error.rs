use std::path::{Path, PathBuf};
use std::process::ExitCode;

use gazeward_core::Error as CoreError;

/// Failures surfaced by the file formats, the remote client and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        AppError::Config(message.into())
    }

    /// 2 config, 3 I/O (including unreadable inputs and cue services),
    /// 4 divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => 2,
            AppError::Io { .. } | AppError::Parse { .. } | AppError::Format { .. } => 3,
            AppError::Core(e) => match e {
                CoreError::Diverged { .. } => 4,
                CoreError::Provider { .. } | CoreError::Protocol(_) | CoreError::Validation(_) => 3,
                CoreError::InvalidArgument(_) | CoreError::Shape { .. } => 2,
            },
        }
    }
}

impl From<&AppError> for ExitCode {
    fn from(e: &AppError) -> Self {
        ExitCode::from(e.exit_code())
    }
}
