//! Differentiable wireless Gaussian splatting for 6D channel knowledge maps.
//!
//! A scene is a set of anisotropic Gaussian ellipsoids that act both as
//! virtual scatterer clusters and as obstacles. For any transmitter and
//! receiver position the engine predicts the complex SIMO channel vector seen
//! by a uniform planar array, its power gain and its Bartlett spatial
//! spectrum. Ellipsoid parameters are learned from sparse channel
//! measurements with Adam and adaptive density control.
//!
//! Module map:
//! - [`scene`]: domain types, reparameterization and the checkpoint format.
//! - [`harmonics`]: real SH basis and reciprocity-constrained bidirectional SH.
//! - [`splatting`]: virtual projection planes, parallel projection, path sets.
//! - [`rendering`]: complex attenuation, steering vectors, forward channel.
//! - [`spectrum`]: Bartlett spectrum, dB scale, losses and metrics.
//! - [`training`]: analytic adjoints, Adam, density control, training loop.
//! - [`datagen`]: analytic ground-truth oracle and dataset files.
//! - [`config`]: TOML run configuration with dotted-key overrides.

pub mod config;
pub mod datagen;
pub mod error;
pub mod harmonics;
pub mod rendering;
pub mod scene;
pub mod spectrum;
pub mod splatting;
pub mod training;

pub use error::{CkmError, Result};
pub use num_complex::Complex64;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Wavelength in meters for a carrier frequency in Hz.
pub fn wavelength_for(frequency_hz: f64) -> f64 {
    SPEED_OF_LIGHT / frequency_hz
}
