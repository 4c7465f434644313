//! SAR-optical fusion and cloud-aware reconstruction for multispectral imagery.
//!
//! The crate provides:
//! - a binary patch format plus normalization and synthetic-scene generation
//!   for co-registered Sentinel-style SAR/optical pairs (`raster`, `synth`),
//! - cloud-probability scoring, snow rejection, and adaptive loss weights
//!   (`mask`),
//! - a small double-precision reverse-mode tape and the network blocks built
//!   on it (`autodiff`, `blocks`),
//! - the multi-stage fusion network and reconstruction head (`fusion`,
//!   `reconstruct`),
//! - the weighted MSE + SSIM objective and evaluation metrics (`objective`,
//!   `metrics`),
//! - a deterministic training harness with checkpointing (`train`).
//!
//! All heavy kernels are data-parallel via rayon (the default `parallel`
//! feature) with a sequential fallback; both paths produce bit-identical
//! results.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod mask;
pub mod metrics;
pub mod objective;
pub mod params;
pub mod raster;
pub mod reconstruct;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
