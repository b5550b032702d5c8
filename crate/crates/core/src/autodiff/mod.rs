//! Dense reverse-mode automatic differentiation.
//!
//! Only the operations the encoder and the losses need are provided. Tensors
//! are row-major with at most four axes; the only broadcasting is of a
//! trailing-shape operand across leading axes (biases, gains).

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{check_all_ops, grad_check, relative_error, GradCheck, DEFAULT_COORDS, DEFAULT_STEP};
pub use graph::{BatchStats, Grads, Graph, NormMode, Var, BATCH_NORM_EPS, RMS_NORM_EPS};
pub use tensor::{Mask, Tensor};
