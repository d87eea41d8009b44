use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// `Config` and `Shape` are validation failures (the CLI maps them to exit
/// code 2); the rest are runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid token: {0}")]
    Token(String),

    #[error("invalid attention mask: {0}")]
    Mask(String),

    #[error("position {position} exceeds max_positions {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("non-finite values at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Whether this error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Shape(_)
                | Error::Token(_)
                | Error::Mask(_)
                | Error::PositionOverflow { .. }
                | Error::Checkpoint(_)
                | Error::Corpus(_)
                | Error::Toml(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
