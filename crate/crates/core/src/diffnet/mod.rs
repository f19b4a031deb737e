//! Minimal reverse-mode building blocks: a dense matrix, a two-layer
//! perceptron with an explicit tape, and a finite-difference checker.

pub mod gradcheck;
pub mod matrix;
pub mod mlp;

pub use gradcheck::{grad_check, grad_check_at};
pub use matrix::{dot, sq_dist, Matrix};
pub use mlp::{Activation, Mlp2, Mlp2Grad, Mlp2Tape};
