//! Estimation of camera spectral sensitivity curves from publicly available
//! colorimetric calibration matrices.
//!
//! The library builds a linear system from a camera's 3x3 color matrices
//! (as shipped in DNG metadata for illuminants A and D65), regularizes the
//! underdetermined solution space with an autoencoder trained on a database
//! of measured sensitivity curves, and recovers an n x 3 response matrix on
//! a 400-700 nm wavelength grid. Downstream applications (correlated color
//! temperature estimation, underwater attenuation recovery, daylight locus,
//! raw-to-raw mapping) are provided in [`apps`].

pub mod apps;
pub mod colorsystem;
pub mod dng;
pub mod estimator;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod prior;
pub mod rng;
pub mod spectra;
pub mod synth;
pub mod validation;

pub use colorsystem::{ColorMatrixRecord, Illuminant, SensitivityMatrix, SpecificSystem};
pub use dng::CameraRecord;
pub use numerics::Matrix;
pub use spectra::{IlluminantMatrix, ObserverMatrix, SpectralCurve, SpectralGrid};
