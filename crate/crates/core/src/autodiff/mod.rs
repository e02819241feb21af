//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Tensors are laid out `[channels, spatial..]`; scalars have shape `[]`.
//! A [`Tape`] records operations as they are evaluated and
//! [`Tape::backward`] sweeps them in reverse. Weights live in a
//! [`ParamStore`] and are copied onto each tape as leaves.

mod check;
mod conv;
mod param;
mod tape;
mod tensor;

pub use check::gradcheck;
pub use param::{Adam, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
