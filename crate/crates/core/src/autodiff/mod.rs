//! Dense `f64` tensors with tape-based reverse-mode differentiation,
//! MLP building blocks, initializers and optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod store;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{finite_difference_grad, relative_error};
pub use mlp::{kaiming_init, mlp_forward, mlp_forward_frozen, Activation, MlpSpec};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind};
pub use store::{MomentState, ParameterStore};
pub use tape::{logistic, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected rank <= {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("concatenation of zero tensors")]
    EmptyConcat,
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable {index} is not on this tape (len {len})")]
    Detached { index: usize, len: usize },
    #[error("parameter {0:?} is already registered")]
    DuplicateParam(String),
    #[error("parameter {0:?} not found")]
    MissingParam(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}
