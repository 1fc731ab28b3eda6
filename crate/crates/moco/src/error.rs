use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum MocoError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Core(#[from] moco_core::Error),

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl MocoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MocoError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        MocoError::Format { path: path.into(), line, msg: msg.into() }
    }

    /// Process exit code: 1 usage, 2 data or format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            MocoError::Usage(_) => 1,
            MocoError::Io { .. } | MocoError::Format { .. } => 2,
            MocoError::Core(moco_core::Error::NonFinite(_)) | MocoError::CheckFailed(_) => 3,
            MocoError::Core(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MocoError>;
