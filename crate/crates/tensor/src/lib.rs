//! Minimal dense tensors of 64-bit floats with reverse-mode automatic
//! differentiation.
//!
//! Values live in [`Tensor`]s. Differentiable computation is recorded on a
//! [`Tape`] through [`Var`] handles; [`Tape::backward`] walks the recording in
//! reverse and returns [`Gradients`] for every leaf that requires them.
//! Trainable state is kept in a [`ParamStore`], updated by the optimizers in
//! [`optim`] and persisted with [`checkpoint`].

pub mod checkpoint;
mod error;
pub mod gemm;
pub mod gradcheck;
mod ops;
pub mod optim;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::conv_output_dim;
pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
