//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use graph::{
    elementwise, layer_norm, scaled_softmax_rows, Activation, Gradients, Graph, Var, LAYER_NORM_EPS,
};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};
