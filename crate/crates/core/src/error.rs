use std::path::PathBuf;

use segkit_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input of size {h}x{w} is not a multiple of {multiple}; pad the image first")]
    InputSize { h: usize, w: usize, multiple: usize },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("checkpoint was written for a different model configuration (digest {stored} vs {expected}); differing fields: {fields}")]
    DigestMismatch {
        stored: String,
        expected: String,
        fields: String,
    },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("benchmark gate failed for {kernel}: max abs diff {diff:e}")]
    BenchGate { kernel: String, diff: f64 },
}

pub type Result<T, E = SegError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SegError {
    let path = path.into();
    move |source| SegError::Io { path, source }
}
