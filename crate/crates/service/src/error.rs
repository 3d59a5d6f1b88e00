use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Image(String),
    #[error(transparent)]
    Core(#[from] attnerase_core::Error),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

impl ServiceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for bad invocations or inputs, 3 for file
    /// problems, 4 for backend failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Usage(_) => 2,
            ServiceError::Io { .. } | ServiceError::Image(_) => 3,
            ServiceError::Core(e) if e.is_backend() => 4,
            ServiceError::Core(_) => 2,
        }
    }
}
