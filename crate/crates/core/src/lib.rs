//! Post-training quantization toolkit for small transformer encoders.
//!
//! The crate covers the full loop:
//!
//! 1. [`synthetic`] builds a benchmark model whose activations carry
//!    planted outliers (a few spiked dimensions, a few outlier tokens) plus
//!    a labeled dataset it solves at full precision.
//! 2. [`migration`] rewrites LayerNorm scales into the following weights,
//!    an equivalent transform that moves the outlier burden out of the
//!    activation quantizers.
//! 3. [`calibration`] picks quantizer parameters: minmax, omse, percentile
//!    and easyquant baselines plus token-wise clipping (a coarse shared
//!    clip-ratio search refined by gradient descent on the step sizes).
//! 4. [`metrics`] measures what happened: per-slot cosine reports, outlier
//!    structure, clip-impact sweeps, model size and task accuracy.
//!
//! [`quantizer`] defines the uniform affine fake-quant math (with a
//! straight-through gradient), [`model`]/[`forward`] the encoder graph and
//! its instrumented forward pass, [`io`] the JSON file formats, and
//! [`slot`] the naming scheme tying quantizer locations to graph positions.

pub mod calibration;
pub mod error;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod migration;
pub mod model;
pub mod quantizer;
pub mod slot;
pub mod synthetic;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
