use std::path::Path;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    /// Classify a core error raised while processing `path`.
    pub fn from_core(path: &Path, e: fsod_core::Error) -> Self {
        let msg = format!("{}: {e}", path.display());
        match e {
            fsod_core::Error::InvalidParameter(_) | fsod_core::Error::NonPositiveTemperature(_) | fsod_core::Error::NegativeWeight(_) => {
                CliError::Config(msg)
            }
            _ => CliError::Data(msg),
        }
    }
}

impl From<fsod_core::Error> for CliError {
    fn from(e: fsod_core::Error) -> Self {
        match e {
            fsod_core::Error::InvalidParameter(_) | fsod_core::Error::NonPositiveTemperature(_) | fsod_core::Error::NegativeWeight(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
