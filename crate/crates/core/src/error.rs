use thiserror::Error;

/// Errors raised by panel ingestion, configuration parsing and the sampler.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("duplicate cell (population={population}, year={year}, age={age})")]
    DuplicateCell {
        population: String,
        year: i64,
        age: String,
    },

    #[error("line {line}: invalid count `{value}` (expected a non-negative integer)")]
    InvalidCount { line: u64, value: String },

    #[error("line {line}: invalid offset `{value}` (expected a positive real)")]
    InvalidOffset { line: u64, value: String },

    #[error("line {line}: invalid year `{value}`")]
    InvalidYear { line: u64, value: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{block}: conditional precision is not positive definite after ridge ({detail})")]
    NotPositiveDefinite { block: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
