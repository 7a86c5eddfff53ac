use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed field at row {row}: {message}")]
    Malformed { row: usize, message: String },

    #[error("fewer than 2 valid rows")]
    TooFewRows,

    #[error("in-sample length {in_sample_len} out of range for series of length {len}")]
    SplitOutOfRange { in_sample_len: usize, len: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("singular innovation covariance")]
    Singular,

    #[error("non-positive variance")]
    NonPositiveVariance,

    #[error("non-positive price {0}")]
    NonPositivePrice(f64),

    #[error("regressor is constant; least-squares design is singular")]
    ConstantRegressor,

    #[error("series too short: need at least {needed}, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("filter diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("ledger transactions are not sorted by close time")]
    Unsorted,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
