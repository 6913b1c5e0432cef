use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing value for date {date}, cell ({row}, {col}), variable `{variable}`")]
    MissingCell {
        date: String,
        row: usize,
        col: usize,
        variable: String,
    },

    #[error("duplicate value for date {date}, cell ({row}, {col}), variable `{variable}`")]
    DuplicateCell {
        date: String,
        row: usize,
        col: usize,
        variable: String,
    },

    #[error("unknown variable `{0}` (not declared in the manifest)")]
    UnknownVariable(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}: validation loss is not finite")]
    Diverged { epoch: usize },

    #[error("all {0} tuning trials diverged")]
    AllTrialsDiverged(usize),

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
