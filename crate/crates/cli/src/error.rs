use std::io;
use std::path::Path;

/// Failure of a command, carrying the process exit status it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config, or inputs; exit status 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] shapeprior::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(shapeprior::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            context: path.display().to_string(),
            source,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json: {e}"))
    }
}
