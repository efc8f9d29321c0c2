use thiserror::Error;

/// Errors produced by model construction, projection and detection.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("modulation order {0} is not a perfect square >= 4")]
    InvalidModOrder(usize),

    #[error("noise variance must be positive and finite, got {0}")]
    InvalidNoiseVariance(f64),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("group count {groups} does not divide {rows} received components")]
    InvalidGrouping { groups: usize, rows: usize },

    #[error("enumeration of {states} joint states exceeds the cap of {cap}")]
    EnumerationCap { states: u128, cap: u64 },

    #[error(
        "marginal probability {value:e} fell below the floor for symbol {symbol}, level {level}"
    )]
    ProbabilityUnderflow {
        symbol: usize,
        level: usize,
        value: f64,
    },

    #[error("Sherman-Morrison denominator {denominator:e} too small (symbol {symbol:?})")]
    SingularUpdate {
        symbol: Option<usize>,
        denominator: f64,
    },

    #[error("surrogate variance {value:e} is not positive for symbol {symbol}")]
    NonPositiveSurrogateVariance { symbol: usize, value: f64 },

    #[error("Cholesky factorization failed: {0}")]
    Factorization(String),

    #[error("non-finite EACS at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("projection failed at iteration {iteration}, group {group}: {source}")]
    Projection {
        iteration: usize,
        group: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("channel file line {line}: {msg}")]
    ChannelFile { line: usize, msg: String },

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
