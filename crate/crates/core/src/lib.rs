//! Human pose estimation from WiFi channel state information.
//!
//! The pipeline runs from raw CSI amplitudes to keypoints:
//!
//! - [`wavelet`]: multilevel DWT and threshold denoising of each subcarrier.
//! - [`dataset`]: frame assembly, video alignment, clips, windows and splits.
//! - [`model`]: the CNN encoder, dual-stream spatiotemporal attention blocks
//!   and the velocity branch, built on the tape autograd in [`autograd`].
//! - [`training`]: loss, Adam, the epoch loop, checkpoints and gradient checks.
//! - [`evaluation`]: PCK, MPJPE and Procrustes-aligned MPJPE reports.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*32`/`*64` aliases below name the common instantiations.

pub mod autograd;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type VstPose32 = model::VstPose<f32>;
pub type VstPose64 = model::VstPose<f64>;
pub type Parameters32 = model::Parameters<f32>;
pub type Parameters64 = model::Parameters<f64>;
pub type CsiWindow32 = dataset::CsiWindow<f32>;
pub type CsiWindow64 = dataset::CsiWindow<f64>;
