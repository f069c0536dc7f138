//! Small reverse-mode automatic differentiation engine over 2-D `f64`
//! tensors, with an Adam optimizer and JSON checkpoints.

mod graph;
mod optim;
mod tensor;

use thiserror::Error;

pub use graph::{log_sum_exp, sigmoid, softmax_in_place, Graph, Var};
pub use optim::{AdamConfig, Gradients, ParamId, ParameterStore, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: [usize; 2], right: [usize; 2] },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("backward already ran on this graph")]
    DoubleBackward,
    #[error("mask selects no rows")]
    EmptyMask,
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests;
