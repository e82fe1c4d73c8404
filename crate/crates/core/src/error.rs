use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters, shapes, or model layout.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad samples or labels.
    #[error("data error: {0}")]
    Data(String),

    #[error("partition error: class {class} has {available} samples left, {requested} requested (raise samples_per_class)")]
    Partition {
        class: usize,
        available: usize,
        requested: usize,
    },

    /// Two parameter containers (or masks) that must line up element-wise do not.
    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("malformed mask payload: {0}")]
    Wire(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
