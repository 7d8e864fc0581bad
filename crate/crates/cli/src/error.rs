use std::path::{Path, PathBuf};

use thiserror::Error;

use sbi_vfm::Error as CoreError;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn from_io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::NotFound(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    /// Process exit status: 2 configuration, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NotFound(_) | CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Shape { .. } => 2,
                CoreError::Numeric { .. } | CoreError::Domain(_) => 3,
                CoreError::Format(_) | CoreError::Io(_) | CoreError::Json(_) => 4,
            },
        }
    }
}

/// Fail with [`CliError::NotFound`] before a reader hides the path.
pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::NotFound(path.to_path_buf()))
    }
}
