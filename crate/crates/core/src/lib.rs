//! Super-resolution toolkit for radiograph-like grayscale images.
//!
//! The pipeline couples a CNN encoder built around an orientation operator
//! (directional strip means reduced by variance pooling) and a multi-scale
//! feature fusion stage with a window-attention transformer decoder. The
//! crate also ships the synthetic degradation model used to build paired
//! LR/HR datasets, a deterministic training loop, and PSNR/SSIM evaluation
//! on the luminance channel.
//!
//! Everything is plain CPU `f64`; randomness is always explicit via seeds.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod model;
pub mod orientation;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod util;
pub mod viz;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::FeatureMap;
