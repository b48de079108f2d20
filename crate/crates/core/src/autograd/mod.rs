//! Minimal reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation in evaluation order together with
//! whatever the backward rule needs. [`Tape::backward`] consumes the tape,
//! so a graph is used for exactly one reverse pass.

mod check;
mod real;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheck};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
