use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An environment, policy, mechanism or experiment is misconfigured.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called in a setting where it is not defined.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid probability vector: {0}")]
    Probability(String),

    /// Exhaustive enumeration was requested for a space above the limit.
    #[error("enumeration space has {cardinality} paths, limit is {limit}")]
    TooLarge { cardinality: u128, limit: u128 },

    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
