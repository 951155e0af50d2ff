use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CrrnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrrnError {
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("unsupported schema version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },
}

impl CrrnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            CrrnError::NotFound(path)
        } else {
            CrrnError::Io { path, source }
        }
    }

    /// Process exit code for this error: 2 for anything the caller can fix by
    /// changing inputs or configuration, 1 for runtime and I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CrrnError::Io { .. } | CrrnError::Integrity(_) | CrrnError::Format(_) | CrrnError::Numeric(_) => 1,
            CrrnError::NotFound(_)
            | CrrnError::Dimension(_)
            | CrrnError::Argument(_)
            | CrrnError::Config(_)
            | CrrnError::Version { .. } => 2,
        }
    }
}
