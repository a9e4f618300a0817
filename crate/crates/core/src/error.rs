use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("sample `{id}`: {reason}")]
    Sample { id: String, reason: String },

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFiniteLoss {
        component: &'static str,
        iteration: u64,
    },

    #[error("not enough candidates: {0}")]
    NotEnoughCandidates(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("invalid annotation record: {0}")]
    InvalidRecord(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn sample(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Sample {
            id: id.into(),
            reason: reason.into(),
        }
    }
}
