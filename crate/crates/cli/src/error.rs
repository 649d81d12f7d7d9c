use std::path::PathBuf;

use grood::GroodError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] GroodError),

    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }

    /// Process exit status; each category has its own code.
    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "usage" => 2,
            "io" => 3,
            "format" => 4,
            "manifest" => 5,
            "dimension" => 6,
            "empty" => 7,
            "parameter" => 8,
            "missing_input" => 9,
            "degenerate" => 10,
            "disjointness" => 11,
            "config" => 12,
            _ => 1,
        }
    }
}
