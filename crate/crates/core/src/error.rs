use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A geometric configuration with no unique solution (e.g. collinear points).
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// Tensor or latent shape does not match the configured law.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A pipeline stage was requested before its prerequisites exist.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// An on-disk artifact exists but was produced under a different config.
    #[error("config hash mismatch: {0}")]
    ConfigHash(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
