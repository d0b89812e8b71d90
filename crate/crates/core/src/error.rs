use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation requires.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Convolution/pooling geometry that does not produce an integral output.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Stain matrix could not be estimated from the given pixels.
    #[error("stain estimation error: {0}")]
    Estimation(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing path: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::MissingPath(_) | Error::Checkpoint(_)
        )
    }
}
