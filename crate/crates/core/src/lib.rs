//! Sparse-view CT reconstruction from score-based sinogram priors.
//!
//! Two score models drive a predictor-corrector diffusion over the
//! missing views of a sinogram: one trained on randomly masked sinograms,
//! one trained on randomly chosen wavelet detail bands. Measured views are
//! re-imposed after every step and the completed sinogram is reconstructed
//! with filtered back-projection.

pub mod error;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod phantom;
pub mod recon;
pub mod rng;
pub mod score;
pub mod sde;
pub mod tomo;
pub mod wavelet;

pub use error::{Error, Result};
