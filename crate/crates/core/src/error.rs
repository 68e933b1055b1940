use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("cannot read image {}: {msg}", path.display())]
    ImageRead { path: PathBuf, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("backend `{backend}` failed: {msg}")]
    Backend { backend: String, msg: String },

    #[error("segmentation produced no masks")]
    DegenerateSegmentation,

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{stage} diverged at iteration {iter} (loss {loss})")]
    Diverged { stage: String, iter: usize, loss: f64 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("job {0} already completed")]
    JobDone(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn backend(backend: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Backend { backend: backend.into(), msg: msg.into() }
    }
}
