//! Dense 2-D tensors and a reverse-mode tape, plus a finite-difference oracle.

mod finite_diff;
mod graph;
mod tensor;

pub use finite_diff::{finite_diff_grad, relative_error};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::{bce_term, contrastive_nll_value, sigmoid, softplus};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
