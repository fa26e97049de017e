//! Dense `f64` tensors and the reverse-mode tape that differentiates them.

pub mod kernels;
mod tape;
mod value;

pub use tape::{BackwardRule, Tape, Var, LOG_FLOOR};
pub use value::Tensor;
