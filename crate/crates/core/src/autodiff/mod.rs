//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{broadcast_shape, AttentionSpec, Tape, Var};
pub use tensor::Tensor;

