//! Minimal numeric substrate: dense arrays, the differentiable layers used by
//! small convolutional models, a reverse-mode gradient tape, an
//! adaptive-moment optimizer and the NDT1 tensor file format.

mod array;
mod element;
mod error;
pub mod kernels;
mod ndt;
mod optim;
mod params;
mod tape;

pub use array::NdArray;
pub use element::{gemm, DType, Element};
pub use error::{NdError, Result};
pub use kernels::{conv2d, group_norm, linear, self_attention, upsample2x, AttentionWeights};
pub use optim::Adam;
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
