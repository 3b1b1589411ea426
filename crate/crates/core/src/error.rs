use thiserror::Error;

/// Errors produced by the registration engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a documented invariant (bad config, malformed pose, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// No candidate pose projects any point into the image.
    #[error("no overlap between point cloud and image frustum at iteration {iteration}")]
    NoOverlap { iteration: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    /// A verification run (e.g. a gradient check) exceeded its tolerance.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("tensor file: {0}")]
    TensorFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
