//! Dense tensors, a reverse-mode tape and the finite-difference oracle.

mod fd;
mod tape;
mod tensor;

pub use fd::{finite_difference_gradient, max_relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, log_sum_exp, softmax, Tensor};

pub(crate) use tensor::affine_rows;
