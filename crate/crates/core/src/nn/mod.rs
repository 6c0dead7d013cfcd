//! Minimal float32 tensor math, reverse-mode autodiff, and Adam.

pub mod adam;
pub mod f64ref;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
