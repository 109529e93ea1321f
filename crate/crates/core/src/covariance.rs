//! Stationary covariance models on the toroidal grid and the circulant
//! matrix algebra built from their DFT eigenvalue spectra.
//!
//! The covariance matrix over grid cells under the toroidal metric is block
//! circulant with circulant blocks, so it is fully described by its base
//! matrix: the covariances between cell `(0, 0)` and every cell at index lag
//! `(lx, ly)`. The 2-D DFT of the base matrix gives the eigenvalues of the
//! full `m x m` covariance matrix, and every matrix-vector operation
//! (products, square roots, inverse roots, log determinants) becomes an
//! elementwise operation on the spectrum between a forward and an inverse
//! FFT.

use rustfft::num_complex::Complex;

use crate::error::Error;
use crate::fft::Fft2;
use crate::grid::Grid;
use crate::special::{bessel_k, ln_gamma};
use crate::Result;

/// Stationary isotropic covariance families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    Exponential,
    Matern,
}

/// A stationary covariance model: marginal variance `sigma2`, spatial decay
/// `phi` (length units), and Matern smoothness `nu` (fixed, not sampled;
/// ignored by the exponential family).
#[derive(Debug, Clone, Copy)]
pub struct CovarianceModel {
    pub kind: CovarianceKind,
    pub sigma2: f64,
    pub phi: f64,
    pub nu: f64,
}

impl CovarianceModel {
    pub fn exponential(sigma2: f64, phi: f64) -> Result<Self> {
        Self::new(CovarianceKind::Exponential, sigma2, phi, 1.0)
    }

    pub fn matern(sigma2: f64, phi: f64, nu: f64) -> Result<Self> {
        Self::new(CovarianceKind::Matern, sigma2, phi, nu)
    }

    pub fn new(kind: CovarianceKind, sigma2: f64, phi: f64, nu: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::validation(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !(phi.is_finite() && phi > 0.0) {
            return Err(Error::validation(format!("phi must be positive, got {phi}")));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::validation(format!("nu must be positive, got {nu}")));
        }
        Ok(CovarianceModel { kind, sigma2, phi, nu })
    }

    /// The same family and smoothness at different scale parameters; used
    /// when the sampler moves the log covariance parameters.
    pub fn with_scale(&self, sigma2: f64, phi: f64) -> Result<Self> {
        Self::new(self.kind, sigma2, phi, self.nu)
    }

    /// Covariance at separation distance `d >= 0`.
    pub fn value(&self, d: f64) -> Result<f64> {
        if !(d >= 0.0) {
            return Err(Error::validation(format!("distance must be >= 0, got {d}")));
        }
        Ok(self.value_at(d))
    }

    fn value_at(&self, d: f64) -> f64 {
        match self.kind {
            CovarianceKind::Exponential => self.sigma2 * (-d / self.phi).exp(),
            CovarianceKind::Matern => {
                let a = d * (2.0 * self.nu).sqrt() / self.phi;
                if a < 1e-10 {
                    return self.sigma2;
                }
                let log_c = (1.0 - self.nu) * 2f64.ln() - ln_gamma(self.nu)
                    + self.nu * a.ln();
                self.sigma2 * (log_c.exp() * bessel_k(self.nu, a))
            }
        }
    }
}

/// Relative positive-definiteness tolerance: eigenvalues at or below
/// `PD_TOLERANCE * sigma2` are treated as a modelling failure rather than
/// clipped, because clipping silently changes the covariance.
pub const PD_TOLERANCE: f64 = 1e-10;

/// The covariance base matrix and its DFT eigenvalue spectrum, with the
/// planned FFT it was built against. Immutable; all operations take `&self`
/// and are safe to call concurrently.
#[derive(Debug, Clone)]
pub struct SpectralBase {
    fft: Fft2,
    base: Vec<f64>,
    eigs: Vec<f64>,
    sqrt_eigs: Vec<f64>,
    min_eig: f64,
    sigma2: f64,
}

impl SpectralBase {
    /// Builds the base matrix over toroidal lags and its eigenvalue grid.
    ///
    /// Fails with [`Error::NonPositiveDefinite`] when the smallest
    /// eigenvalue is at or below tolerance; the caller can then extend the
    /// grid or tighten the decay prior.
    pub fn build(grid: &Grid, model: &CovarianceModel, fft: &Fft2) -> Result<Self> {
        let (n1, n2) = (grid.n1(), grid.n2());
        assert_eq!((fft.n1(), fft.n2()), (n1, n2), "FFT plan does not match grid shape");
        let m = grid.m();

        // The base is symmetric under per-axis index negation, so one
        // quadrant of covariance evaluations fills the whole matrix.
        let mut base = vec![0.0; m];
        for ly in 0..=n2 / 2 {
            for lx in 0..=n1 / 2 {
                let v = model.value_at(grid.lag_distance(lx, ly));
                let lx2 = (n1 - lx) % n1;
                let ly2 = (n2 - ly) % n2;
                base[ly * n1 + lx] = v;
                base[ly * n1 + lx2] = v;
                base[ly2 * n1 + lx] = v;
                base[ly2 * n1 + lx2] = v;
            }
        }

        let mut buf: Vec<Complex<f64>> =
            base.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.forward(&mut buf);
        let eigs: Vec<f64> = buf.iter().map(|v| v.re).collect();
        let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        if !min_eig.is_finite() {
            return Err(Error::numerical(format!(
                "covariance spectrum contains a non-finite eigenvalue (model {model:?})"
            )));
        }
        if min_eig <= PD_TOLERANCE * model.sigma2 {
            return Err(Error::NonPositiveDefinite { min_eig });
        }
        let sqrt_eigs = eigs.iter().map(|&e| e.sqrt()).collect();
        Ok(SpectralBase { fft: fft.clone(), base, eigs, sqrt_eigs, min_eig, sigma2: model.sigma2 })
    }

    /// Base matrix in scanline layout: lag `(lx, ly)` at `ly * n1 + lx`.
    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// Eigenvalues of the full covariance matrix, same layout as `base`.
    pub fn eigs(&self) -> &[f64] {
        &self.eigs
    }

    /// Square roots of the eigenvalues (the spectrum of `Sigma^(1/2)`).
    pub fn sqrt_eigs(&self) -> &[f64] {
        &self.sqrt_eigs
    }

    /// The FFT plan this base was built against.
    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn min_eig(&self) -> f64 {
        self.min_eig
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn m(&self) -> usize {
        self.base.len()
    }

    /// Log determinant of the covariance matrix.
    pub fn logdet(&self) -> f64 {
        self.eigs.iter().map(|&e| e.ln()).sum()
    }

    fn spectral_apply(&self, v: &[f64], weight: impl Fn(usize) -> f64) -> Vec<f64> {
        assert_eq!(v.len(), self.m(), "vector does not match grid size");
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.forward(&mut buf);
        for (i, b) in buf.iter_mut().enumerate() {
            *b *= weight(i);
        }
        self.fft.inverse(&mut buf);
        buf.iter().map(|b| b.re).collect()
    }

    /// Symmetric square root product: `Sigma^(1/2) v`. Applying it twice
    /// equals the dense covariance product `Sigma v`.
    pub fn sqrt_matvec(&self, v: &[f64]) -> Vec<f64> {
        self.spectral_apply(v, |i| self.sqrt_eigs[i])
    }

    /// Inverse square root product: `Sigma^(-1/2) v`.
    pub fn inv_sqrt_matvec(&self, v: &[f64]) -> Vec<f64> {
        self.spectral_apply(v, |i| 1.0 / self.sqrt_eigs[i])
    }

    /// Full covariance product `Sigma v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        self.spectral_apply(v, |i| self.eigs[i])
    }

    /// Whitening inverse: the latent log-frailty field
    /// `Y = -sigma2/2 + Sigma^(1/2) gamma`, whose exponential has unit mean
    /// under standard normal `gamma`.
    pub fn gamma_to_field(&self, gamma: &[f64]) -> Vec<f64> {
        let mut y = self.sqrt_matvec(gamma);
        let shift = -0.5 * self.sigma2;
        for v in &mut y {
            *v += shift;
        }
        y
    }
}
