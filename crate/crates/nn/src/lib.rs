//! Minimal reverse-mode automatic differentiation for small convolutional
//! networks on the CPU.
//!
//! A [`Tape`] records operations over [`Tensor`]s; parameters live in a
//! [`ParamStore`] and are updated by [`Adam`] from the [`Gradients`] a
//! backward sweep produces.

pub mod kernels;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig, Ema};
pub use params::{normal, uniform_fan_in, Param, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var, GROUP_NORM_EPS};
pub use tensor::Tensor;
