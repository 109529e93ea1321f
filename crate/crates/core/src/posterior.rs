//! The joint log posterior over `(beta, omega_t, eta_t, gamma [, u])` and
//! its gradients for the Langevin blocks.
//!
//! The latent field is parameterized by its whitened coordinates: `gamma`
//! is a priori standard normal, and the field is recovered per evaluation
//! as `Y = -sigma^2/2 + Sigma^(1/2) gamma`. The covariance parameters only
//! enter through the transform, so no Gaussian log determinant appears in
//! the posterior, and the gradient with respect to `gamma` needs just one
//! extra square-root product thanks to the symmetry of `Sigma^(1/2)`.

use crate::covariance::{CovarianceModel, SpectralBase};
use crate::error::Error;
use crate::fft::Fft2;
use crate::grid::Grid;
use crate::outcome::{
    ln_factorial, poisson_dloglik_deta, poisson_loglik_cached, record_dloglik_deta,
    record_dloglik_domega, record_loglik_with_deta, Observations, WeibullBaseline,
};
use crate::Result;

/// An independent Normal prior on one scalar parameter.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPrior {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianPrior {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
            return Err(Error::validation(format!(
                "prior must have finite mean and positive sd, got N({mean}, {sd}^2)"
            )));
        }
        Ok(GaussianPrior { mean, sd })
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * (2.0 * std::f64::consts::PI).ln() - self.sd.ln() - 0.5 * z * z
    }

    pub fn grad(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.sd * self.sd)
    }

    pub fn variance(&self) -> f64 {
        self.sd * self.sd
    }
}

/// Priors for every sampled block. `sigma_u` is the fixed iid-frailty scale,
/// present exactly when the model includes per-record frailties.
#[derive(Debug, Clone)]
pub struct Priors {
    pub beta: Vec<GaussianPrior>,
    pub omega_t: Vec<GaussianPrior>,
    pub log_sigma: GaussianPrior,
    pub log_phi: GaussianPrior,
    pub sigma_u: Option<f64>,
}

impl Priors {
    /// Vague defaults: N(0, 10^2) on regression and log baseline parameters,
    /// N(0, 0.5^2) on log sigma, and the given prior on log phi.
    pub fn vague(p: usize, n_omega: usize, log_phi: GaussianPrior) -> Self {
        let wide = GaussianPrior { mean: 0.0, sd: 10.0 };
        Priors {
            beta: vec![wide; p],
            omega_t: vec![wide; n_omega],
            log_sigma: GaussianPrior { mean: 0.0, sd: 0.5 },
            log_phi,
            sigma_u: None,
        }
    }
}

/// The sampled parameter vector on its transformed scale.
#[derive(Debug, Clone)]
pub struct ParameterState {
    /// Covariate effects.
    pub beta: Vec<f64>,
    /// Log baseline parameters (log shape, log rate); empty for counts.
    pub omega_t: Vec<f64>,
    /// Log covariance parameters (log sigma, log phi).
    pub eta_t: [f64; 2],
    /// Whitened field coordinates, a priori standard normal.
    pub gamma: Vec<f64>,
    /// Optional iid per-record frailties.
    pub u: Option<Vec<f64>>,
}

impl ParameterState {
    /// The all-zero state (the chain's designated starting field).
    pub fn zeros(p: usize, n_omega: usize, m: usize, n_u: Option<usize>) -> Self {
        ParameterState {
            beta: vec![0.0; p],
            omega_t: vec![0.0; n_omega],
            eta_t: [0.0, 0.0],
            gamma: vec![0.0; m],
            u: n_u.map(|n| vec![0.0; n]),
        }
    }

    pub fn sigma2(&self) -> f64 {
        (2.0 * self.eta_t[0]).exp()
    }

    pub fn phi(&self) -> f64 {
        self.eta_t[1].exp()
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().all(|v| v.is_finite())
            && self.omega_t.iter().all(|v| v.is_finite())
            && self.eta_t.iter().all(|v| v.is_finite())
            && self.gamma.iter().all(|v| v.is_finite())
            && self.u.as_ref().is_none_or(|u| u.iter().all(|v| v.is_finite()))
    }
}

/// One full evaluation of the posterior at a state: the value, the derived
/// field, and the gradients of every Langevin block.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub log_posterior: f64,
    /// The latent field `Y` on the grid.
    pub field: Vec<f64>,
    /// Gradient over the concatenated `(beta, omega_t)` block.
    pub grad_beta_omega: Vec<f64>,
    /// Gradient over `gamma`.
    pub grad_gamma: Vec<f64>,
    /// Gradient over `u` when iid frailties are enabled.
    pub grad_u: Option<Vec<f64>>,
}

/// Immutable evaluation context: data, grid, covariance family, priors, and
/// per-record caches. Evaluation is pure, so any number of candidate states
/// may be evaluated concurrently against one context.
#[derive(Debug, Clone)]
pub struct PosteriorContext {
    grid: Grid,
    fft: Fft2,
    obs: Observations,
    cells: Vec<usize>,
    n_covariates: usize,
    family: CovarianceModel,
    priors: Priors,
    ln_z_fact: Vec<f64>,
}

impl PosteriorContext {
    pub fn new(
        grid: Grid,
        obs: Observations,
        family: CovarianceModel,
        priors: Priors,
    ) -> Result<Self> {
        let p = obs.validate()?;
        if !obs.is_empty() && p != priors.beta.len() {
            return Err(Error::validation(format!(
                "records carry {p} covariates but {} beta priors are configured",
                priors.beta.len()
            )));
        }
        if priors.omega_t.len() != obs.n_omega() {
            return Err(Error::validation(format!(
                "outcome needs {} baseline parameters but {} omega priors are configured",
                obs.n_omega(),
                priors.omega_t.len()
            )));
        }
        if let Some(su) = priors.sigma_u {
            if !(su.is_finite() && su > 0.0) {
                return Err(Error::validation(format!("sigma_u must be positive, got {su}")));
            }
        }
        let cells = (0..obs.len())
            .map(|i| grid.cell_of(obs.location(i)))
            .collect::<Result<Vec<_>>>()?;
        let ln_z_fact = match &obs {
            Observations::Count(records) => records.iter().map(|r| ln_factorial(r.z)).collect(),
            Observations::Survival(_) => Vec::new(),
        };
        let fft = Fft2::new(grid.n1(), grid.n2());
        Ok(PosteriorContext {
            grid,
            fft,
            obs,
            cells,
            n_covariates: priors.beta.len(),
            family,
            priors,
            ln_z_fact,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn observations(&self) -> &Observations {
        &self.obs
    }

    /// Per-record grid cell indices.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_omega(&self) -> usize {
        self.obs.n_omega()
    }

    pub fn priors(&self) -> &Priors {
        &self.priors
    }

    pub fn covariance_family(&self) -> &CovarianceModel {
        &self.family
    }

    /// Whether states must carry iid frailties.
    pub fn uses_u(&self) -> bool {
        self.priors.sigma_u.is_some()
    }

    /// The covariance model at a state's `(log sigma, log phi)`.
    pub fn model_at(&self, eta_t: &[f64; 2]) -> Result<CovarianceModel> {
        self.family.with_scale((2.0 * eta_t[0]).exp(), eta_t[1].exp())
    }

    /// Builds the spectral base at a state's covariance parameters.
    pub fn spectral_at(&self, eta_t: &[f64; 2]) -> Result<SpectralBase> {
        SpectralBase::build(&self.grid, &self.model_at(eta_t)?, &self.fft)
    }

    fn check_dims(&self, state: &ParameterState) -> Result<()> {
        if state.beta.len() != self.n_covariates
            || state.omega_t.len() != self.obs.n_omega()
            || state.gamma.len() != self.grid.m()
            || state.u.is_some() != self.uses_u()
            || state.u.as_ref().is_some_and(|u| u.len() != self.obs.len())
        {
            return Err(Error::validation(format!(
                "state dimensions do not match the model (beta {}, omega {}, gamma {}, u {:?})",
                state.beta.len(),
                state.omega_t.len(),
                state.gamma.len(),
                state.u.as_ref().map(Vec::len)
            )));
        }
        if !state.is_finite() {
            return Err(Error::numerical("non-finite parameter state"));
        }
        Ok(())
    }

    /// Full evaluation: log posterior, latent field, and block gradients.
    ///
    /// Any error (non-positive-definite covariance at the state's `eta_t`,
    /// degenerate likelihood, non-finite arithmetic) means the state has no
    /// usable posterior value; the sampler treats that as a rejection when
    /// it arises at a candidate.
    pub fn evaluate(&self, state: &ParameterState) -> Result<Evaluation> {
        self.check_dims(state)?;
        let sb = self.spectral_at(&state.eta_t)?;
        let field = sb.gamma_to_field(&state.gamma);

        let n = self.obs.len();
        let p = self.n_covariates;
        let n_omega = self.obs.n_omega();
        let mut loglik = 0.0;
        // Cell-aggregated d loglik / d eta, the seed of the gamma gradient.
        let mut g_cells = vec![0.0; self.grid.m()];
        let mut grad_beta_omega = vec![0.0; p + n_omega];
        let mut grad_u = state.u.as_ref().map(|u| vec![0.0; u.len()]);

        match &self.obs {
            Observations::Survival(records) => {
                let b = WeibullBaseline::from_log(&state.omega_t);
                if !(b.alpha.is_finite() && b.lambda.is_finite()) {
                    return Err(Error::numerical(format!(
                        "baseline parameters overflow at omega_t {:?}",
                        state.omega_t
                    )));
                }
                for (i, r) in records.iter().enumerate() {
                    let eta = linear_predictor(&r.covariates, &state.beta, field[self.cells[i]])
                        + state.u.as_ref().map_or(0.0, |u| u[i]);
                    let (ll, d) = record_loglik_with_deta(r, &b, eta)?;
                    loglik += ll;
                    g_cells[self.cells[i]] += d;
                    for (j, x) in r.covariates.iter().enumerate() {
                        grad_beta_omega[j] += x * d;
                    }
                    let dom = record_dloglik_domega(r, &b, eta)?;
                    grad_beta_omega[p] += dom[0];
                    grad_beta_omega[p + 1] += dom[1];
                    if let Some(gu) = grad_u.as_mut() {
                        gu[i] = d;
                    }
                }
            }
            Observations::Count(records) => {
                for (i, r) in records.iter().enumerate() {
                    let eta = linear_predictor(&r.covariates, &state.beta, field[self.cells[i]])
                        + state.u.as_ref().map_or(0.0, |u| u[i]);
                    if !eta.is_finite() {
                        return Err(Error::numerical(format!("non-finite linear predictor {eta}")));
                    }
                    loglik += poisson_loglik_cached(r.z, eta, self.ln_z_fact[i]);
                    let d = poisson_dloglik_deta(r.z, eta)?;
                    g_cells[self.cells[i]] += d;
                    for (j, x) in r.covariates.iter().enumerate() {
                        grad_beta_omega[j] += x * d;
                    }
                    if let Some(gu) = grad_u.as_mut() {
                        gu[i] = d;
                    }
                }
            }
        }
        let _ = n;

        // Priors and their gradients.
        let mut log_prior = 0.0;
        for (j, pr) in self.priors.beta.iter().enumerate() {
            log_prior += pr.logpdf(state.beta[j]);
            grad_beta_omega[j] += pr.grad(state.beta[j]);
        }
        for (k, pr) in self.priors.omega_t.iter().enumerate() {
            log_prior += pr.logpdf(state.omega_t[k]);
            grad_beta_omega[p + k] += pr.grad(state.omega_t[k]);
        }
        log_prior += self.priors.log_sigma.logpdf(state.eta_t[0]);
        log_prior += self.priors.log_phi.logpdf(state.eta_t[1]);

        // Whitened field prior: standard normal on gamma.
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let gamma_sq: f64 = state.gamma.iter().map(|g| g * g).sum();
        log_prior += -(state.gamma.len() as f64) * half_ln_2pi - 0.5 * gamma_sq;

        if let (Some(u), Some(su)) = (&state.u, self.priors.sigma_u) {
            let var = su * su;
            let u_sq: f64 = u.iter().map(|v| v * v).sum();
            log_prior += -(u.len() as f64) * (half_ln_2pi + su.ln()) - 0.5 * u_sq / var;
            if let Some(gu) = grad_u.as_mut() {
                for (gi, ui) in gu.iter_mut().zip(u) {
                    *gi -= ui / var;
                }
            }
        }

        // Chain rule through the symmetric square root, then the gamma
        // prior score.
        let mut grad_gamma = sb.sqrt_matvec(&g_cells);
        for (gg, g) in grad_gamma.iter_mut().zip(&state.gamma) {
            *gg -= g;
        }

        let log_posterior = loglik + log_prior;
        if log_posterior.is_nan() {
            return Err(Error::numerical("log posterior evaluated to NaN"));
        }
        Ok(Evaluation { log_posterior, field, grad_beta_omega, grad_gamma, grad_u })
    }

    /// The log posterior and the cached latent field.
    pub fn log_posterior(&self, state: &ParameterState) -> Result<(f64, Vec<f64>)> {
        let ev = self.evaluate(state)?;
        Ok((ev.log_posterior, ev.field))
    }

    /// Gradient over the concatenated `(beta, omega_t)` block.
    pub fn grad_beta_omega(&self, state: &ParameterState) -> Result<Vec<f64>> {
        Ok(self.evaluate(state)?.grad_beta_omega)
    }

    /// Gradient over `gamma`.
    pub fn grad_gamma(&self, state: &ParameterState) -> Result<Vec<f64>> {
        Ok(self.evaluate(state)?.grad_gamma)
    }
}

#[inline]
fn linear_predictor(x: &[f64], beta: &[f64], y_cell: f64) -> f64 {
    let mut eta = y_cell;
    for (xi, bi) in x.iter().zip(beta) {
        eta += xi * bi;
    }
    eta
}
