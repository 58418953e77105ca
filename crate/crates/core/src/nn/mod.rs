//! Minimal CPU tensor and autograd engine backing the hotspot classifier.

pub mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax, Tensor};
