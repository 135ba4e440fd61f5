// NaN guards read as `!(x > 0.0)` on purpose; numeric kernels take many arguments.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::type_complexity,
    clippy::needless_range_loop
)]

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod image;
pub mod metrics;
pub mod par;
pub mod repaint;
pub mod rng;
pub mod synthlab;

pub use error::{Error, Result};
