//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod kernels;
mod tape;

pub use kernels::ConvGeom;
pub use tape::{Broadcast, Gradients, Pattern, Tape, Var};
