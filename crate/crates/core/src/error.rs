use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite value produced by primitive `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("variable {0} was not recorded on this tape with requires_grad")]
    NotRecorded(usize),

    #[error("primitive `{0}` does not support differentiable gradients")]
    NotTwiceDifferentiable(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("loss term `{0}` is not finite")]
    NonFiniteLoss(&'static str),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
