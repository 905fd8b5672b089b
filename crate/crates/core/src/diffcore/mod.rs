//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod array;
pub mod gradcheck;
pub mod linalg;
mod tape;

pub use array::Array;
pub use gradcheck::{central_difference, grad_check, max_relative_error};
pub use tape::{Axis, Gradients, Node, Op, Tape, Var};
