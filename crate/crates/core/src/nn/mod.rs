//! Minimal CPU training engine: NCHW tensors, convolutions, batch norm,
//! pointwise activations and Adam, each with a hand-written backward pass.
//!
//! All kernels run single-threaded in a fixed order, so results are bitwise
//! reproducible for identical inputs.

mod activation;
mod adam;
mod block;
mod conv;
mod norm;
mod param;
mod tensor;

pub use activation::{sigmoid, Activation};
pub use adam::Adam;
pub use block::{upsample2x, upsample2x_backward, ConvBlock, ConvBlockCache};
pub use conv::Conv2d;
pub use norm::{BatchNorm2d, BnCache, BN_EPS, BN_MOMENTUM};
pub use param::{Buffer, Module, Param};
pub(crate) use param::join;
pub use tensor::Tensor;
