//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records one forward computation (typically one image pair) and
//! replays it backwards into [`Grads`] aligned with a [`ParamStore`].

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{Grads, ParamId, ParamStore};
pub use tape::{ConvSpec, Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;
