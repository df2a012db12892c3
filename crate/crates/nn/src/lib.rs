//! A small reverse-mode autodiff engine for convolutional image codecs.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Tensors are dense
//! and row-major; image tensors are `[C, H, W]` and one tape processes one
//! sample, so batching happens by running independent tapes and summing
//! their parameter gradients in a fixed order.

pub mod archive;
pub mod factorized;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, ParamGrads, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
