//! Virtual lightstage simulation and a gated mixture-of-experts pipeline
//! for near-planar anisotropic SVBRDF capture.
//!
//! The crate covers the full loop: a calibrated virtual capture device,
//! lumitexel rendering and multiplexed measurement, a small fully-connected
//! network substrate with hand-written backpropagation, the gated
//! mixture-of-experts model with jointly trained lighting patterns, dataset
//! synthesis and training, and the per-texel runtime that recovers GGX
//! texture maps from measurements.

pub mod brdf;
pub mod device;
pub mod error;
pub mod fit;
pub mod imageio;
pub mod lightstage;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod render;
pub mod scene;
pub mod seeding;
pub mod ssim;
pub mod train;

pub use error::{Error, Result};
