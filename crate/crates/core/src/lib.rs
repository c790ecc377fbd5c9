//! Sparse Gaussian-process compression of single LiDAR scans.
//!
//! A scan is projected onto an occupancy surface over (azimuth, inclination),
//! summarized by a few hundred inducing points plus kernel hyperparameters,
//! serialized into a fixed little-endian layout and reconstructed on the
//! receiving side by thresholding the GP's predictive variance.

pub mod error;
pub mod geometry;
pub mod kernel;
mod linalg;
pub mod encoder;
pub mod decoder;
pub mod wire;
pub mod transport;
pub mod synth;
pub mod eval;

pub use error::{Error, Result};
