//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The op set is exactly what the noise-prediction network and the
//! measurement residuals need. Broadcasting is limited to a right operand
//! whose shape is a suffix of the left operand's shape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
