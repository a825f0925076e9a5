use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::container::ContainerError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("config key `{key}`: {detail}")]
    ConfigKey { key: String, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Container { path: PathBuf, source: ContainerError },
    #[error("report line {line}: {detail}")]
    Report { line: usize, detail: String },
    #[error(transparent)]
    Core(#[from] d2moe::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn key(key: &str, detail: impl Into<String>) -> Self {
        CliError::ConfigKey { key: key.to_string(), detail: detail.into() }
    }

    /// Process exit code: 2 for usage and configuration problems, 3 for
    /// files that cannot be read, written or decoded, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigKey { .. } => EXIT_USAGE,
            CliError::Io { .. } | CliError::Container { .. } | CliError::Report { .. } => EXIT_IO,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn core_exit_code(e: &d2moe::Error) -> i32 {
    match e {
        d2moe::Error::Stage { source, .. } => core_exit_code(source),
        d2moe::Error::InvalidParameter { .. } | d2moe::Error::InfeasibleBudget { .. } => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}
