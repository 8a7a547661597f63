//! Dense tensors, linear algebra, reverse-mode autodiff and the Adam optimizer.

mod adam;
pub mod linalg;
pub mod random;
mod tape;
mod tensor;

#[cfg(test)]
mod gradcheck;

pub use adam::AdamState;
pub use random::{fork, randn, seeded, uniform, Rng};
pub use tape::{sigmoid, softplus, Gradients, ParamId, ParamStore, Tape, Unary, Var};
pub use tensor::Tensor;
