use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] vdm_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file could not be parsed.
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    /// A checkpoint was written by an incompatible format version.
    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    Version { path: PathBuf, found: u64, expected: u64 },
    /// A checkpoint parsed but its tensors do not fit together.
    #[error("{path}: inconsistent checkpoint: {message}")]
    Inconsistent { path: PathBuf, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    /// A rerun produced outputs that differ from the manifest.
    #[error("rerun mismatch: {0}")]
    Mismatch(String),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Core(vdm_core::Error::Diverged { .. } | vdm_core::Error::NonFiniteLoss { .. }) => 3,
            LabError::Core(_) | LabError::Config(_) => 2,
            LabError::Io { .. }
            | LabError::Parse { .. }
            | LabError::Version { .. }
            | LabError::Inconsistent { .. }
            | LabError::Mismatch(_) => 4,
        }
    }
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

pub(crate) fn write(path: &std::path::Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}
