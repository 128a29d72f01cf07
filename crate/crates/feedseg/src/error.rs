//! Crate-wide error type. Variants map onto the CLI exit codes:
//! config/usage problems, data/I-O problems, contract (shape) violations and
//! numeric failures are kept distinct so callers can react per class.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("shape contract: {0}")]
    Contract(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code class for the CLI: 1 usage/config, 2 data/io, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 2,
            Error::Contract(_) | Error::Numeric(_) => 3,
        }
    }
}
