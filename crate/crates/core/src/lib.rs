//! Neural attenuation fields for sparse-view cone-beam CT.
//!
//! The crate covers the full pipeline: a ray-marched cone-beam simulator,
//! a multiresolution hash-encoded attenuation field with hand-written
//! gradients, Adam and Reptile-style meta-initialization, field and classical
//! (SART, ASD-POCS) reconstructors, and 3D PSNR/SSIM evaluation.

pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod optim;
pub mod projector;
pub mod recon;
pub mod scalar;

pub use error::{Error, Result};
