//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor dimensions, naming the operation and both dim lists.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid input data (images, manifests).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite values appeared where they must not.
    #[error("numeric fault: {0}")]
    Numeric(String),

    /// Malformed or truncated checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset-level problem (bad manifest entry, undecodable image).
    #[error("dataset error: {0}")]
    Data(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
