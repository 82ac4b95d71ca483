//! Dense `f64` arrays and a reverse-mode tape over the primitives the models
//! and losses need.

mod array;
mod kernels;
mod tape;

pub use array::Tensor;
pub use kernels::{forward_primitive, Primitive};
pub use tape::{Gradients, NodeId, Tape};
