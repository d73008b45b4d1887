//! Dense arrays and reverse-mode automatic differentiation.
//!
//! Everything is `f64`: stacked log-determinants amplify rounding, and the
//! networks here are small enough that precision beats speed.

mod array;
mod check;
mod tape;

pub use array::{gemm, log_abs_det, Array2};
pub use check::{grad_check, grad_check_sampled, rel_err, rel_err_floored, LossBuilder, FD_NOISE_FLOOR};
pub use tape::{BnOutput, Gradients, NodeId, Tape};
