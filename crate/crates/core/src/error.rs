use thiserror::Error;

/// Errors surfaced by the library.
///
/// `Contract` marks caller bugs (shape mismatches, invalid hyperparameters),
/// `Data` marks bad inputs (infeasible targets, out-of-vocabulary symbols),
/// `Format` marks unreadable on-disk artifacts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

pub(crate) use contract;
