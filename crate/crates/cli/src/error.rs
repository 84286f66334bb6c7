use std::path::PathBuf;

use crate::config::ConfigError;
use crate::run::RunReport;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, report: Box<RunReport> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] dimcl::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit status: 2 configuration, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use dimcl::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Io { .. } | CliError::Json(_) | CliError::Csv(_) => 4,
            CliError::Core(e) => match e {
                E::Diverged { .. } => 3,
                E::Io(_) | E::Format(_) | E::Checksum { .. } | E::Truncated { .. } | E::LabelOutOfRange { .. } => 4,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
