//! Dense matrices and reverse-mode differentiation.

pub mod gradcheck;
pub mod graph;
pub mod matrix;

pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};
pub use graph::{log_softmax_rows, softmax_rows, Graph, Var, LAYER_NORM_EPS};
pub use matrix::Mat;
