use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss component `{component}`")]
    NonFiniteLoss { component: &'static str },

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("missing checkpoint: expected {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at frame {frame}: {source}")]
    Diverged {
        frame: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
