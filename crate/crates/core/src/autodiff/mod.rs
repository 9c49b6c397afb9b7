//! Dense reverse-mode automatic differentiation over a fixed layer vocabulary:
//! 3x3 convolution, 2x2 max-pool, ReLU, affine, batchnorm, dropout, flatten,
//! concat, and the two classification losses. All arithmetic is `f64`.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ABSOLUTE_FLOOR};
pub use graph::{log_softmax, sigmoid, softmax_rows, Feed, Graph, Mode, Node, NodeId, Op, Param, ParamId};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: NodeId,
        op: &'static str,
        detail: String,
    },
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("input `{0}` contains non-finite values")]
    NonFiniteInput(String),
    #[error("backward requested before a forward pass")]
    NoForward,
    #[error("node {0} is not a loss node")]
    NotALoss(NodeId),
    #[error("target {value} at node {node} is not a class id below {classes}")]
    TargetOutOfRange {
        node: NodeId,
        value: f64,
        classes: usize,
    },
    #[error("gradient for parameter `{0}` is not finite")]
    NonFiniteGradient(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid optimizer settings: {0}")]
    InvalidOptimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
