//! Tensor operations with reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod tape;

pub use tape::{Gradients, Mode, Tape, Var};
