//! Reverse-mode differentiation over dense tensors.
//!
//! The engine supports exactly the operations a small vision transformer and
//! its attack losses need: matrix products, broadcasting arithmetic against a
//! trailing or leading operand, softmax variants, layer normalization, row
//! gathers and reductions. Values are `f32` by default; the same code runs in
//! `f64` for gradient checks.

mod error;
pub mod gradcheck;
mod graph;
mod gumbel;
mod real;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Graph, OpKind, Var};
pub use gumbel::{gumbel_softmax, sample_gumbel};
pub use real::Real;
pub use tensor::{sign, Tensor};
