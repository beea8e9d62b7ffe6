use std::path::Path;

/// Failure of a command, classified by the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<aenet_core::Error> for CliError {
    fn from(e: aenet_core::Error) -> Self {
        use aenet_core::Error as E;
        match e {
            E::NonFinite(_) | E::Diverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
