//! CLI error type; every failure class maps to a distinct exit code.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] crcrisk_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Exit codes: 2 config, 3 missing artifact, 4 numerical failure,
    /// 5 undefined metric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(crcrisk_core::Error::Config(_)) => 2,
            CliError::Missing(_) => 3,
            CliError::Core(crcrisk_core::Error::Numerical(_)) => 4,
            CliError::Core(crcrisk_core::Error::UndefinedMetric(_)) => 5,
            _ => 1,
        }
    }
}

/// Open-for-read helper that reports a missing path as a missing artifact
/// rather than a bare IO error.
pub fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(CliError::Missing(path.display().to_string()))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn read_artifact_string(path: &Path) -> Result<String> {
    let bytes = read_artifact(path)?;
    String::from_utf8(bytes)
        .map_err(|_| CliError::Format(format!("{} is not valid UTF-8", path.display())))
}
