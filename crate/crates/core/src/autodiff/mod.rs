//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! There is no implicit broadcasting; bias rows are expanded with
//! [`Tape::broadcast_rows`]. A fresh [`Tape`] is built for every forward pass.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{finite_difference_check, GradCheck, GradCheckReport};
pub use params::{Binder, ParamStore};
pub use tape::{BinaryOp, Gradients, Reduction, Tape, UnaryOp, Var};
#[allow(unused_imports)]
pub(crate) use tape::{huber_grad, huber_value};
pub use tensor::Tensor;
