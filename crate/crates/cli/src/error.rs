use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or input data.
    #[error("{0}")]
    Validation(String),
    /// Failures while running: I/O, numerical breakdown, aborted chains.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl From<bpmf_core::Error> for CliError {
    fn from(e: bpmf_core::Error) -> Self {
        use bpmf_core::Error as E;
        match e {
            E::Io(_) | E::NotPositiveDefinite { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn validation<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Validation(msg.into()))
}
