//! Dense `f64` tensors, a define-by-run reverse-mode tape and the primitive
//! operations needed by the SELD network, plus a finite-difference gradient
//! checker and a binary container format for named tensors.

mod error;
mod fdiff;
mod graph;
mod kernels;
pub mod pack;
mod tensor;

pub use error::{Error, Result};
pub use fdiff::{finite_diff_check, forward_eval};
pub use graph::{
    sigmoid, softplus, BatchNormMode, BatchStats, Conv1dPadding, Function, Graph, Unary, Var,
};
pub use tensor::Tensor;
