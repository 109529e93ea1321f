//! Fourier-accelerated MCMC for latent-Gaussian spatial survival and count
//! models.
//!
//! The engine replaces per-individual spatially correlated frailties with
//! auxiliary frailties attached to a toroidally wrapped regular grid, so that
//! every covariance operation (square roots, gradients, log determinants)
//! runs through two-dimensional FFTs in O(m log m) instead of dense matrix
//! factorizations in O(n^3).
//!
//! Module layout:
//! - [`grid`]: the extended toroidal lattice and record-to-cell mapping.
//! - [`covariance`]: stationary covariance models, base matrices, DFT
//!   eigenvalue spectra, and circulant matrix-vector algebra.
//! - [`outcome`]: Weibull proportional-hazards survival likelihood with four
//!   censoring types, plus the Poisson count alternative.
//! - [`posterior`]: joint log posterior and analytic gradients in the
//!   whitened parameterization.
//! - [`mcmc`]: blocked adaptive MALA/random-walk kernel, three-stage
//!   initialization, and the multi-candidate parallel proposal variant.
//! - [`prediction`]: posterior field summaries, baseline-hazard and
//!   covariance bands, and convergence diagnostics.
//! - [`simulate`]: synthetic field, survival, and count data generators.
//! - [`dense`]: dense-matrix reference implementations used as test oracles
//!   and as the comparison arm of the cost benchmark.

pub mod covariance;
pub mod dense;
pub mod error;
pub mod fft;
pub mod grid;
pub mod mcmc;
pub mod optim;
pub mod outcome;
pub mod posterior;
pub mod prediction;
pub mod simulate;
pub mod special;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
