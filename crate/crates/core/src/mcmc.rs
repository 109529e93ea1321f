//! Blocked adaptive Metropolis-Hastings: one joint kernel with Langevin
//! proposals for the regression and whitened-field blocks, a random walk for
//! the log covariance parameters, a single adaptively tuned global scale,
//! a multi-candidate accelerated step, and the three-stage initializer that
//! produces the starting state and the per-block preconditioners.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;

use crate::error::Error;
use crate::optim::{maximize, Quadratic2};
use crate::outcome::{
    poisson_dloglik_deta, poisson_loglik, ratio_expm1, record_dloglik_deta,
    record_dloglik_domega, record_loglik_with_deta, Censoring, Observations, WeibullBaseline,
};
use crate::posterior::{Evaluation, ParameterState, PosteriorContext};
use crate::Result;

/// Numerator of the Langevin-block scaling 1.65^2 / dim^{1/3}.
const LANGEVIN_NUM: f64 = 1.65 * 1.65;
/// Numerator of the random-walk scaling 2.38^2 / dim.
const RANDOM_WALK_NUM: f64 = 2.38 * 2.38;
/// Relative scale of the gradient-free covariance-parameter block, roughly
/// the ratio of the optimal random-walk and Langevin acceptance rates.
const ETA_BLOCK_FACTOR: f64 = 0.4;
/// Bounds keeping the adapted global scale finite.
const H_MIN: f64 = 1e-6;
const H_MAX: f64 = 1e3;

/// Per-block proposal scalings: a single adaptive global scale `h`, fixed
/// dimension-dependent block constants, and preconditioners estimated at
/// initialization.
#[derive(Debug, Clone)]
pub struct ProposalScalings {
    h: f64,
    h2_bo: f64,
    h2_eta: f64,
    h2_gamma: f64,
    c: f64,
    sigma_bo: DMatrix<f64>,
    sigma_eta: DMatrix<f64>,
    sigma_gamma: Vec<f64>,
    sigma_u: Option<Vec<f64>>,
    chol_bo: DMatrix<f64>,
    chol_eta: DMatrix<f64>,
}

fn require_spd(label: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::validation(format!("{label} is not symmetric")));
            }
        }
    }
    Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::validation(format!("{label} is not positive definite")))
}

impl ProposalScalings {
    /// Builds scalings from the block preconditioners; `h` starts at 1.
    pub fn new(
        sigma_bo: DMatrix<f64>,
        sigma_eta: DMatrix<f64>,
        sigma_gamma: Vec<f64>,
        sigma_u: Option<Vec<f64>>,
    ) -> Result<Self> {
        let d_bo = sigma_bo.nrows();
        if sigma_bo.ncols() != d_bo {
            return Err(Error::validation("regression preconditioner must be square"));
        }
        let chol_bo = if d_bo == 0 {
            DMatrix::zeros(0, 0)
        } else {
            require_spd("regression preconditioner", &sigma_bo)?
        };
        if sigma_eta.nrows() != 2 || sigma_eta.ncols() != 2 {
            return Err(Error::validation("covariance-parameter preconditioner must be 2x2"));
        }
        let chol_eta = require_spd("covariance-parameter preconditioner", &sigma_eta)?;
        if sigma_gamma.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::validation("field preconditioner entries must be positive"));
        }
        if let Some(su) = &sigma_u {
            if su.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::validation("frailty preconditioner entries must be positive"));
            }
        }
        let field_dim = sigma_gamma.len() + sigma_u.as_ref().map_or(0, |s| s.len());
        Ok(ProposalScalings {
            h: 1.0,
            h2_bo: if d_bo == 0 { 1.0 } else { LANGEVIN_NUM / (d_bo as f64).cbrt() },
            h2_eta: RANDOM_WALK_NUM / 2.0,
            h2_gamma: if field_dim == 0 { 1.0 } else { LANGEVIN_NUM / (field_dim as f64).cbrt() },
            c: ETA_BLOCK_FACTOR,
            sigma_bo,
            sigma_eta,
            sigma_gamma,
            sigma_u,
            chol_bo,
            chol_eta,
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Sets the global scale, clamped to the adaptation bounds.
    pub fn set_h(&mut self, h: f64) {
        assert!(h > 0.0 && h.is_finite(), "global scale must be positive");
        self.h = h.clamp(H_MIN, H_MAX);
    }

    pub fn h2_bo(&self) -> f64 {
        self.h2_bo
    }

    pub fn h2_eta(&self) -> f64 {
        self.h2_eta
    }

    pub fn h2_gamma(&self) -> f64 {
        self.h2_gamma
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn sigma_bo(&self) -> &DMatrix<f64> {
        &self.sigma_bo
    }

    pub fn sigma_eta(&self) -> &DMatrix<f64> {
        &self.sigma_eta
    }

    pub fn sigma_gamma(&self) -> &[f64] {
        &self.sigma_gamma
    }

    pub fn sigma_u(&self) -> Option<&[f64]> {
        self.sigma_u.as_deref()
    }
}

/// Chain run length, retention, and adaptation settings.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub n_iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Candidates proposed per iteration; 1 is the plain single-proposal step.
    pub n_workers: usize,
    pub target_acceptance: f64,
    /// Exponent of the diminishing adaptation gain i^{-e}; must lie in
    /// (0.5, 1] so the gains sum to infinity while their squares do not.
    pub adapt_exponent: f64,
    /// Stop adapting `h` once burn-in ends (keeps the retained portion of
    /// the chain exactly stationary).
    pub freeze_after_burnin: bool,
    pub initial_h: f64,
}

impl ChainConfig {
    pub fn new(n_iterations: usize, burnin: usize, thin: usize, seed: u64) -> Self {
        ChainConfig {
            n_iterations,
            burnin,
            thin,
            seed,
            n_workers: 1,
            target_acceptance: 0.574,
            adapt_exponent: 0.6,
            freeze_after_burnin: true,
            initial_h: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::validation("n_iterations must be positive"));
        }
        if self.burnin >= self.n_iterations {
            return Err(Error::validation(format!(
                "burnin ({}) must be smaller than n_iterations ({})",
                self.burnin, self.n_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::validation("thin must be at least 1"));
        }
        if self.n_workers == 0 {
            return Err(Error::validation("n_workers must be at least 1"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::validation("target acceptance must lie in (0, 1)"));
        }
        if !(self.adapt_exponent > 0.5 && self.adapt_exponent <= 1.0) {
            return Err(Error::validation("adaptation exponent must lie in (0.5, 1]"));
        }
        if !(self.initial_h > 0.0 && self.initial_h.is_finite()) {
            return Err(Error::validation("initial global scale must be positive"));
        }
        Ok(())
    }
}

/// One retained draw. The field is stored on the observation scale `Y`, not
/// as whitened coordinates.
#[derive(Debug, Clone)]
pub struct RetainedSample {
    pub beta: Vec<f64>,
    pub omega_t: Vec<f64>,
    pub eta_t: [f64; 2],
    pub field: Vec<f64>,
}

/// Everything a finished run reports: retained samples plus aligned
/// log-posterior and running-acceptance traces, and the final scalings.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub samples: Vec<RetainedSample>,
    pub log_posterior: Vec<f64>,
    pub acceptance_rate: Vec<f64>,
    pub scalings: ProposalScalings,
}

/// A chain position together with its cached posterior evaluation.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub params: ParameterState,
    pub eval: Evaluation,
}

impl ChainState {
    pub fn new(ctx: &PosteriorContext, params: ParameterState) -> Result<Self> {
        let eval = ctx.evaluate(&params)?;
        Ok(ChainState { params, eval })
    }
}

/// A drawn candidate plus the standard-normal noise that produced it (the
/// proposal ratio reuses it) and the log of its acceptance uniform.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub params: ParameterState,
    z_bo: DVector<f64>,
    z_gamma: Vec<f64>,
    z_u: Vec<f64>,
    log_u: f64,
}

/// Draws one joint candidate: Langevin moves for the regression and field
/// blocks, a plain random walk for the covariance parameters, and the
/// acceptance uniform immediately after the Gaussian noise.
pub fn propose(current: &ChainState, s: &ProposalScalings, rng: &mut ChaCha8Rng) -> Proposal {
    let cur = &current.params;
    let ev = &current.eval;
    let h2 = s.h * s.h;
    let p = cur.beta.len();
    let d_bo = p + cur.omega_t.len();
    debug_assert_eq!(d_bo, s.sigma_bo.nrows());
    debug_assert_eq!(cur.gamma.len(), s.sigma_gamma.len());

    let z_bo = DVector::from_fn(d_bo, |_, _| rng.sample(StandardNormal));
    let mut bo =
        DVector::from_iterator(d_bo, cur.beta.iter().chain(cur.omega_t.iter()).copied());
    if d_bo > 0 {
        let tau = h2 * s.h2_bo;
        let g = DVector::from_column_slice(&ev.grad_beta_omega);
        bo += (tau / 2.0) * (&s.sigma_bo * g) + tau.sqrt() * (&s.chol_bo * &z_bo);
    }

    // The covariance-parameter block is gradient free.
    let tau_eta = s.c * h2 * s.h2_eta;
    let z_eta = DVector::from_fn(2, |_, _| rng.sample(StandardNormal));
    let eta_step = tau_eta.sqrt() * (&s.chol_eta * z_eta);
    let eta_t = [cur.eta_t[0] + eta_step[0], cur.eta_t[1] + eta_step[1]];

    let tau_g = h2 * s.h2_gamma;
    let mut z_gamma = vec![0.0; cur.gamma.len()];
    let mut gamma = cur.gamma.clone();
    for k in 0..gamma.len() {
        let z: f64 = rng.sample(StandardNormal);
        z_gamma[k] = z;
        let sg = s.sigma_gamma[k];
        gamma[k] += (tau_g / 2.0) * sg * ev.grad_gamma[k] + (tau_g * sg).sqrt() * z;
    }

    let mut z_u = Vec::new();
    let u = cur.u.as_ref().map(|u_cur| {
        let su = s.sigma_u.as_ref().expect("frailty preconditioner present when u is sampled");
        let gu = ev.grad_u.as_ref().expect("frailty gradient present when u is sampled");
        z_u = vec![0.0; u_cur.len()];
        let mut u_new = u_cur.clone();
        for k in 0..u_new.len() {
            let z: f64 = rng.sample(StandardNormal);
            z_u[k] = z;
            u_new[k] += (tau_g / 2.0) * su[k] * gu[k] + (tau_g * su[k]).sqrt() * z;
        }
        u_new
    });

    let log_u = rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
    let slice = bo.as_slice();
    Proposal {
        params: ParameterState {
            beta: slice[..p].to_vec(),
            omega_t: slice[p..].to_vec(),
            eta_t,
            gamma,
            u,
        },
        z_bo,
        z_gamma,
        z_u,
        log_u,
    }
}

/// log q(current | candidate) - log q(candidate | current) for the joint
/// proposal. Each Langevin block with drift (tau/2) Sigma g and covariance
/// tau Sigma contributes (|z|^2 - |z + (sqrt(tau)/2) L^T (g + g')|^2) / 2,
/// where z is the drawn noise and L the preconditioner's Cholesky factor.
/// The covariance-parameter block is a symmetric random walk, so its
/// contribution cancels identically and is omitted rather than computed.
pub fn log_q_ratio(
    s: &ProposalScalings,
    prop: &Proposal,
    current: &Evaluation,
    candidate: &Evaluation,
) -> f64 {
    let h2 = s.h * s.h;
    let mut ratio = 0.0;

    let d_bo = prop.z_bo.len();
    if d_bo > 0 {
        let half_sqrt_tau = 0.5 * (h2 * s.h2_bo).sqrt();
        let g_sum = DVector::from_fn(d_bo, |k, _| {
            current.grad_beta_omega[k] + candidate.grad_beta_omega[k]
        });
        let w = s.chol_bo.tr_mul(&g_sum);
        for k in 0..d_bo {
            let z = prop.z_bo[k];
            let t = z + half_sqrt_tau * w[k];
            ratio += 0.5 * (z * z - t * t);
        }
    }

    let half_sqrt_tau = 0.5 * (h2 * s.h2_gamma).sqrt();
    for (k, &z) in prop.z_gamma.iter().enumerate() {
        let w = s.sigma_gamma[k].sqrt() * (current.grad_gamma[k] + candidate.grad_gamma[k]);
        let t = z + half_sqrt_tau * w;
        ratio += 0.5 * (z * z - t * t);
    }

    if let (Some(su), Some(gc), Some(gd)) =
        (s.sigma_u.as_ref(), current.grad_u.as_ref(), candidate.grad_u.as_ref())
    {
        for (k, &z) in prop.z_u.iter().enumerate() {
            let w = su[k].sqrt() * (gc[k] + gd[k]);
            let t = z + half_sqrt_tau * w;
            ratio += 0.5 * (z * z - t * t);
        }
    }

    ratio
}

/// Outcome of one sampler iteration.
#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    /// Index of the candidate that moved the chain, if any.
    pub accepted: Option<usize>,
    /// Mean of the per-candidate acceptance indicators; the adaptation signal.
    pub mean_indicator: f64,
}

/// One iteration over an arbitrary evaluation function: draw `k` candidates
/// sequentially from the chain's stream (noise, then uniform, per candidate),
/// evaluate them (in parallel when k > 1), then resolve acceptance in index
/// order against the same current state; the first accepted candidate wins.
fn advance_with<F>(
    eval_fn: &F,
    chain: &mut ChainState,
    s: &ProposalScalings,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> StepResult
where
    F: Fn(&ParameterState) -> Result<Evaluation> + Sync,
{
    assert!(k >= 1, "at least one candidate per iteration");
    let proposals: Vec<Proposal> = (0..k).map(|_| propose(chain, s, rng)).collect();
    let mut evals: Vec<Result<Evaluation>> = if k == 1 {
        vec![eval_fn(&proposals[0].params)]
    } else {
        proposals.par_iter().map(|p| eval_fn(&p.params)).collect()
    };

    let mut winner = None;
    let mut hits = 0usize;
    for (i, ev) in evals.iter().enumerate() {
        // A candidate that fails to evaluate (non-positive-definite
        // covariance, degenerate likelihood) is a zero-probability state.
        let Ok(ev) = ev else { continue };
        let log_alpha = ev.log_posterior - chain.eval.log_posterior
            + log_q_ratio(s, &proposals[i], &chain.eval, ev);
        if proposals[i].log_u < log_alpha {
            hits += 1;
            if winner.is_none() {
                winner = Some(i);
            }
        }
    }

    if let Some(i) = winner {
        let mut proposals = proposals;
        chain.params = proposals.swap_remove(i).params;
        chain.eval = evals.swap_remove(i).expect("accepted candidate evaluated");
    }
    StepResult { accepted: winner, mean_indicator: hits as f64 / k as f64 }
}

/// One single-proposal Metropolis-Hastings iteration.
pub fn mh_step(
    ctx: &PosteriorContext,
    chain: &mut ChainState,
    s: &ProposalScalings,
    rng: &mut ChaCha8Rng,
) -> StepResult {
    advance_with(&|p: &ParameterState| ctx.evaluate(p), chain, s, 1, rng)
}

/// One iteration with `k` simultaneous candidates. Every candidate gets its
/// own accept test against the current state and the lowest accepted index
/// becomes the next state, so no acceptance-probability correction is
/// needed; with per-candidate acceptance p the move probability rises to
/// 1 - (1-p)^k.
pub fn parallel_propose(
    ctx: &PosteriorContext,
    chain: &mut ChainState,
    s: &ProposalScalings,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> StepResult {
    advance_with(&|p: &ParameterState| ctx.evaluate(p), chain, s, k, rng)
}

/// Diminishing adaptation gain for iteration `i`.
fn adaptation_gain(iteration: usize, exponent: f64) -> f64 {
    (iteration as f64).powf(-exponent)
}

/// Nudges the global scale toward the target acceptance rate:
/// log h += i^{-e} (indicator - target), bounded to [1e-6, 1e3].
pub fn adapt(
    s: &mut ProposalScalings,
    mean_indicator: f64,
    iteration: usize,
    target: f64,
    exponent: f64,
) {
    debug_assert!(iteration >= 1);
    let gain = adaptation_gain(iteration, exponent);
    let log_h = s.h.ln() + gain * (mean_indicator - target);
    s.h = log_h.exp().clamp(H_MIN, H_MAX);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stage 1: maximum likelihood for (beta, omega) with the field held at
/// zero. Returns the concatenated maximizer.
fn stage1_mle(ctx: &PosteriorContext) -> Result<Vec<f64>> {
    let p = ctx.n_covariates();
    let d = p + ctx.n_omega();
    if d == 0 {
        return Ok(Vec::new());
    }
    let obs = ctx.observations();
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (beta, omega) = x.split_at(p);
        let mut value = 0.0;
        let mut grad = vec![0.0; d];
        match obs {
            Observations::Survival(records) => {
                let b = WeibullBaseline::from_log(omega);
                if !(b.alpha.is_finite() && b.lambda.is_finite() && b.alpha > 0.0 && b.lambda > 0.0)
                {
                    return Err(Error::numerical("baseline parameters out of range"));
                }
                for r in records {
                    let eta = dot(&r.covariates, beta);
                    let (ll, de) = record_loglik_with_deta(r, &b, eta)?;
                    value += ll;
                    for (gj, xj) in grad[..p].iter_mut().zip(&r.covariates) {
                        *gj += de * xj;
                    }
                    let dw = record_dloglik_domega(r, &b, eta)?;
                    grad[p] += dw[0];
                    grad[p + 1] += dw[1];
                }
            }
            Observations::Count(records) => {
                for r in records {
                    let eta = dot(&r.covariates, beta);
                    value += poisson_loglik(r.z, eta)?;
                    let de = poisson_dloglik_deta(r.z, eta)?;
                    for (gj, xj) in grad.iter_mut().zip(&r.covariates) {
                        *gj += de * xj;
                    }
                }
            }
        }
        if !value.is_finite() {
            return Err(Error::numerical("non-finite likelihood"));
        }
        Ok((value, grad))
    };
    Ok(maximize(objective, &vec![0.0; d], 1e-8, 500)?.x)
}

/// The eta maximizing an interval-censored record's contribution: the root
/// of ratio_expm1(Delta) = v1, which decreases from 1 to -inf in eta.
fn interval_eta_root(b: &WeibullBaseline, t1: f64, t2: f64) -> Option<f64> {
    let h1 = b.cum_hazard(t1);
    let h2 = b.cum_hazard(t2);
    if !(h2 > h1 && h1 > 0.0) {
        return None;
    }
    let score = |eta: f64| {
        let e = eta.exp();
        ratio_expm1(e * (h2 - h1)) - e * h1
    };
    let mut lo = 0.0;
    while score(lo) <= 0.0 {
        lo -= 4.0;
        if lo < -700.0 {
            return None;
        }
    }
    let mut hi = lo + 4.0;
    while score(hi) > 0.0 {
        hi += 4.0;
        if hi > 700.0 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Stage 2: an ad hoc field built from per-record eta-maximizing values.
/// Records whose contribution has no finite maximizer (right- and
/// left-censored, zero counts) are skipped; cells average their records and
/// empty cells take the overall mean.
fn stage2_field(ctx: &PosteriorContext, beta: &[f64], omega_t: &[f64]) -> Vec<f64> {
    let m = ctx.grid().m();
    let cells = ctx.cells();
    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    let mut total = 0.0;
    let mut contributors = 0usize;
    let mut push = |cell: usize, y: f64| {
        if y.is_finite() {
            sum[cell] += y;
            count[cell] += 1;
            total += y;
            contributors += 1;
        }
    };
    match ctx.observations() {
        Observations::Survival(records) => {
            let b = WeibullBaseline::from_log(omega_t);
            for (i, r) in records.iter().enumerate() {
                let xb = dot(&r.covariates, beta);
                let y = match r.censoring {
                    // Stationarity of the uncensored term: e^eta H0(t) = 1.
                    Censoring::Uncensored { t } => Some(-b.cum_hazard(t).ln() - xb),
                    Censoring::Interval { t1, t2 } => {
                        interval_eta_root(&b, t1, t2).map(|eta| eta - xb)
                    }
                    Censoring::Right { .. } | Censoring::Left { .. } => None,
                };
                if let Some(y) = y {
                    push(cells[i], y);
                }
            }
        }
        Observations::Count(records) => {
            for (i, r) in records.iter().enumerate() {
                if r.z >= 1 {
                    push(cells[i], (r.z as f64).ln() - dot(&r.covariates, beta));
                }
            }
        }
    }
    if contributors == 0 {
        return vec![0.0; m];
    }
    let overall = total / contributors as f64;
    (0..m)
        .map(|c| if count[c] > 0 { sum[c] / count[c] as f64 } else { overall })
        .collect()
}

/// Stage 3: profile the conditional posterior of the log covariance
/// parameters over a 9x9 lattice spanning +-3 prior standard deviations,
/// fit a quadratic surface, and read off its maximizer and curvature.
/// Falls back to the prior mean and variances when the profile is not
/// usably concave.
fn stage3_eta(ctx: &PosteriorContext, y_hat: &[f64]) -> ([f64; 2], DMatrix<f64>) {
    let ps = ctx.priors().log_sigma;
    let pp = ctx.priors().log_phi;
    let m = ctx.grid().m() as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut pts = Vec::with_capacity(81);
    for i in 0..9 {
        for j in 0..9 {
            let ls = ps.mean + ps.sd * (-3.0 + 0.75 * i as f64);
            let lp = pp.mean + pp.sd * (-3.0 + 0.75 * j as f64);
            // Non-positive-definite lattice points are simply outside the
            // parameter space here; skip them.
            let Ok(spec) = ctx.spectral_at(&[ls, lp]) else { continue };
            let half_s2 = 0.5 * (2.0 * ls).exp();
            let centered: Vec<f64> = y_hat.iter().map(|y| y + half_s2).collect();
            let white = spec.inv_sqrt_matvec(&centered);
            let quad: f64 = white.iter().map(|w| w * w).sum();
            let value = -0.5 * m * ln_2pi - 0.5 * spec.logdet() - 0.5 * quad
                + ps.logpdf(ls)
                + pp.logpdf(lp);
            if value.is_finite() {
                pts.push((ls, lp, value));
            }
        }
    }
    let fallback = || {
        log::warn!(
            "covariance-parameter profile is not usably concave; \
             starting from the prior mean"
        );
        let var = DVector::from_vec(vec![ps.variance(), pp.variance()]);
        ([ps.mean, pp.mean], DMatrix::from_diagonal(&var))
    };
    let Ok(quadratic) = Quadratic2::fit(&pts) else {
        return fallback();
    };
    match quadratic.argmax() {
        Some((eta0, cov)) if eta0.iter().all(|v| v.is_finite()) => {
            let sigma = DMatrix::from_row_slice(2, 2, &[cov[0][0], cov[0][1], cov[1][0], cov[1][1]]);
            (eta0, sigma)
        }
        _ => fallback(),
    }
}

/// Second derivative of one record's log likelihood in eta.
fn loglik_curvature(
    obs: &Observations,
    i: usize,
    b: Option<&WeibullBaseline>,
    eta: f64,
) -> Result<f64> {
    match obs {
        Observations::Survival(records) => {
            let b = b.expect("survival data carry a baseline");
            let h = 1e-5;
            let dp = record_dloglik_deta(&records[i], b, eta + h)?;
            let dm = record_dloglik_deta(&records[i], b, eta - h)?;
            Ok((dp - dm) / (2.0 * h))
        }
        Observations::Count(_) => Ok(-eta.exp()),
    }
}

fn prior_variance_bo(ctx: &PosteriorContext) -> DMatrix<f64> {
    let pri = ctx.priors();
    let vars: Vec<f64> = pri
        .beta
        .iter()
        .chain(pri.omega_t.iter())
        .map(|g| g.variance())
        .collect();
    DMatrix::from_diagonal(&DVector::from_vec(vars))
}

/// Preconditioners from negated inverse second derivatives of the posterior
/// at the initial state, with the field held at the stage-2 estimate: a
/// dense finite-difference block for (beta, omega), and diagonal blocks for
/// the whitened field (via the circulant structure of the square root) and
/// the iid frailties.
fn preconditioners(
    ctx: &PosteriorContext,
    state: &ParameterState,
    y_hat: &[f64],
) -> (DMatrix<f64>, Vec<f64>, Option<Vec<f64>>) {
    let m = ctx.grid().m();
    let n = ctx.observations().len();
    let fallback_u = || ctx.priors().sigma_u.map(|su| vec![su * su; n]);
    match try_preconditioners(ctx, state, y_hat) {
        Ok(out) => out,
        Err(e) => {
            log::warn!("preconditioner estimation failed ({e}); using prior curvature");
            (prior_variance_bo(ctx), vec![1.0; m], fallback_u())
        }
    }
}

fn try_preconditioners(
    ctx: &PosteriorContext,
    state: &ParameterState,
    y_hat: &[f64],
) -> Result<(DMatrix<f64>, Vec<f64>, Option<Vec<f64>>)> {
    let spec = ctx.spectral_at(&state.eta_t)?;
    let m = ctx.grid().m();
    let n = ctx.observations().len();
    let p = state.beta.len();
    let d = p + state.omega_t.len();

    // Whitened coordinates that reproduce the stage-2 field at this scale,
    // so every curvature below is taken at the same point.
    let half_s2 = 0.5 * state.sigma2();
    let centered: Vec<f64> = y_hat.iter().map(|y| y + half_s2).collect();
    let mut base = state.clone();
    base.gamma = spec.inv_sqrt_matvec(&centered);

    let sigma_bo = if d == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let x0: Vec<f64> = base.beta.iter().chain(base.omega_t.iter()).copied().collect();
        let mut hess = DMatrix::zeros(d, d);
        for j in 0..d {
            let hj = 1e-4 * x0[j].abs().max(1.0);
            let displaced = |delta: f64| -> Result<Vec<f64>> {
                let mut st = base.clone();
                if j < p {
                    st.beta[j] = x0[j] + delta;
                } else {
                    st.omega_t[j - p] = x0[j] + delta;
                }
                ctx.grad_beta_omega(&st)
            };
            let gp = displaced(hj)?;
            let gm = displaced(-hj)?;
            for i in 0..d {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * hj);
            }
        }
        let neg = -0.5 * (&hess + hess.transpose());
        match Cholesky::new(neg) {
            Some(ch) => ch.inverse(),
            None => {
                log::warn!(
                    "regression-block curvature is not negative definite; \
                     using prior variances"
                );
                prior_variance_bo(ctx)
            }
        }
    };

    // Per-record curvatures at the stage-2 field, pooled by cell.
    let cells = ctx.cells();
    let baseline = match ctx.observations() {
        Observations::Survival(_) => Some(WeibullBaseline::from_log(&state.omega_t)),
        Observations::Count(_) => None,
    };
    let mut curv = vec![0.0; n];
    let mut w = vec![0.0; m];
    for i in 0..n {
        let eta_i = dot(ctx.observations().covariates(i), &state.beta) + y_hat[cells[i]];
        let c = loglik_curvature(ctx.observations(), i, baseline.as_ref(), eta_i)?;
        curv[i] = c;
        w[cells[i]] += c;
    }

    // Diagonal of S diag(w) S for the circulant root S: the kernel of S is
    // the inverse transform of its eigenvalues, and the diagonal is the
    // circular convolution of w with the squared kernel.
    let fft = ctx.fft();
    let mut kernel: Vec<Complex<f64>> =
        spec.sqrt_eigs().iter().map(|&e| Complex::new(e, 0.0)).collect();
    fft.inverse(&mut kernel);
    let mut squared: Vec<Complex<f64>> =
        kernel.iter().map(|c| Complex::new(c.re * c.re, 0.0)).collect();
    let mut w_hat: Vec<Complex<f64>> = w.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.forward(&mut squared);
    fft.forward(&mut w_hat);
    for (a, b) in w_hat.iter_mut().zip(&squared) {
        *a *= b;
    }
    fft.inverse(&mut w_hat);
    let sigma_gamma: Vec<f64> = (0..m)
        .map(|k| {
            // Posterior curvature in gamma_k is conv_k - 1; where data fail
            // to curve it downward, keep the prior's unit scale.
            let neg_curv = 1.0 - w_hat[k].re;
            if neg_curv > 1e-12 {
                1.0 / neg_curv
            } else {
                1.0
            }
        })
        .collect();

    let sigma_u = ctx.priors().sigma_u.map(|su| {
        let prior_prec = 1.0 / (su * su);
        curv.iter()
            .map(|&c| {
                let neg_curv = prior_prec - c;
                if neg_curv > 1e-12 {
                    1.0 / neg_curv
                } else {
                    su * su
                }
            })
            .collect()
    });

    Ok((sigma_bo, sigma_gamma, sigma_u))
}

/// Builds the starting state and proposal scalings in three stages:
/// likelihood-only maximization of (beta, omega) with the field at zero, an
/// ad hoc field from per-record maximizers, and a quadratic profile of the
/// log covariance parameters. The chain itself starts with the whitened
/// field at zero; the ad hoc field only shapes the preconditioners.
pub fn initialize(ctx: &PosteriorContext) -> Result<(ParameterState, ProposalScalings)> {
    let p = ctx.n_covariates();
    let bo = stage1_mle(ctx)?;
    let beta = bo[..p].to_vec();
    let omega_t = bo[p..].to_vec();

    let y_hat = stage2_field(ctx, &beta, &omega_t);
    let (eta0, sigma_eta) = stage3_eta(ctx, &y_hat);

    let state = ParameterState {
        beta,
        omega_t,
        eta_t: eta0,
        gamma: vec![0.0; ctx.grid().m()],
        u: ctx.uses_u().then(|| vec![0.0; ctx.observations().len()]),
    };
    let (sigma_bo, sigma_gamma, sigma_u) = preconditioners(ctx, &state, &y_hat);
    let scalings = ProposalScalings::new(sigma_bo, sigma_eta, sigma_gamma, sigma_u)?;
    Ok((state, scalings))
}

/// Runs the full sampler: initialization, burn-in with adaptation, and
/// thinned retention of the post-burn-in states. Deterministic given the
/// seed. Candidate evaluation failures reject the candidate; only an
/// invalid starting point aborts.
pub fn run_chain(config: &ChainConfig, ctx: &PosteriorContext) -> Result<ChainOutput> {
    config.validate()?;
    let (params, mut scalings) = initialize(ctx)?;
    scalings.set_h(config.initial_h);
    let mut chain = ChainState::new(ctx, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let capacity = (config.n_iterations - config.burnin) / config.thin;
    let mut samples = Vec::with_capacity(capacity);
    let mut log_posterior = Vec::with_capacity(capacity);
    let mut acceptance_rate = Vec::with_capacity(capacity);
    let mut indicator_sum = 0.0;
    let mut log_h_sum = 0.0;
    let mut log_h_count = 0usize;
    let eval_fn = |p: &ParameterState| ctx.evaluate(p);

    for i in 1..=config.n_iterations {
        let step = advance_with(&eval_fn, &mut chain, &scalings, config.n_workers, &mut rng);
        indicator_sum += step.mean_indicator;
        if i <= config.burnin || !config.freeze_after_burnin {
            adapt(
                &mut scalings,
                step.mean_indicator,
                i,
                config.target_acceptance,
                config.adapt_exponent,
            );
            // The final iterate of the diminishing-gain recursion still
            // carries noise of order sqrt(gain); freezing at the tail
            // average of log h over the second half of burn-in removes
            // most of that wobble (Polyak averaging).
            if config.freeze_after_burnin && 2 * i > config.burnin {
                if i < config.burnin {
                    log_h_sum += scalings.h().ln();
                    log_h_count += 1;
                } else if i == config.burnin && log_h_count > 0 {
                    scalings.set_h((log_h_sum / log_h_count as f64).exp());
                }
            }
        }
        if i > config.burnin && (i - config.burnin) % config.thin == 0 {
            samples.push(RetainedSample {
                beta: chain.params.beta.clone(),
                omega_t: chain.params.omega_t.clone(),
                eta_t: chain.params.eta_t,
                field: chain.eval.field.clone(),
            });
            log_posterior.push(chain.eval.log_posterior);
            acceptance_rate.push(indicator_sum / i as f64);
        }
    }

    Ok(ChainOutput { samples, log_posterior, acceptance_rate, scalings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceModel;
    use crate::grid::{Grid, Point, Rect};
    use crate::outcome::SurvivalRecord;
    use crate::posterior::{GaussianPrior, Priors};

    fn exp_family() -> CovarianceModel {
        CovarianceModel::exponential(1.0, 0.2).unwrap()
    }

    fn toy_state() -> ParameterState {
        ParameterState {
            beta: vec![0.0, 0.0],
            omega_t: vec![],
            eta_t: [0.0, 0.0],
            gamma: vec![],
            u: None,
        }
    }

    fn toy_scalings() -> ProposalScalings {
        ProposalScalings::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), vec![], None)
            .unwrap()
    }

    /// A correlated 2-D Gaussian in beta plus standard-normal terms in the
    /// covariance parameters, with exact gradients.
    fn toy_target(
        mu: [f64; 2],
        prec: [[f64; 2]; 2],
    ) -> impl Fn(&ParameterState) -> Result<Evaluation> + Sync {
        move |p: &ParameterState| {
            let d0 = p.beta[0] - mu[0];
            let d1 = p.beta[1] - mu[1];
            let quad = prec[0][0] * d0 * d0 + 2.0 * prec[0][1] * d0 * d1 + prec[1][1] * d1 * d1;
            let eta_quad = p.eta_t[0] * p.eta_t[0] + p.eta_t[1] * p.eta_t[1];
            Ok(Evaluation {
                log_posterior: -0.5 * quad - 0.5 * eta_quad,
                field: vec![],
                grad_beta_omega: vec![
                    -(prec[0][0] * d0 + prec[0][1] * d1),
                    -(prec[0][1] * d0 + prec[1][1] * d1),
                ],
                grad_gamma: vec![],
                grad_u: None,
            })
        }
    }

    fn toy_chain<F>(target: &F) -> ChainState
    where
        F: Fn(&ParameterState) -> Result<Evaluation>,
    {
        let params = toy_state();
        let eval = target(&params).unwrap();
        ChainState { params, eval }
    }

    fn small_survival_ctx() -> PosteriorContext {
        let grid = Grid::from_bbox(Rect::new(0.0, 0.0, 1.0, 1.0), 2, 2, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut records = Vec::new();
        for i in 0..14 {
            let t = 0.3 + rng.random::<f64>() * 4.0;
            let censoring = match i % 4 {
                0 | 1 => Censoring::Uncensored { t },
                2 => Censoring::Right { t },
                _ => Censoring::Interval { t1: t, t2: t + 1.0 },
            };
            records.push(SurvivalRecord {
                id: i.to_string(),
                censoring,
                covariates: vec![rng.random::<f64>() - 0.5],
                location: Point::new(rng.random::<f64>(), rng.random::<f64>()),
            });
        }
        let priors = Priors::vague(1, 2, GaussianPrior::new((0.3f64).ln(), 0.3).unwrap());
        PosteriorContext::new(grid, Observations::Survival(records), exp_family(), priors).unwrap()
    }

    fn small_count_ctx() -> PosteriorContext {
        let grid = Grid::from_bbox(Rect::new(0.0, 0.0, 1.0, 1.0), 1, 1, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let records: Vec<crate::outcome::CountRecord> = (0..8)
            .map(|i| crate::outcome::CountRecord {
                id: i.to_string(),
                z: [0, 1, 2, 3][i % 4],
                covariates: vec![rng.random::<f64>() - 0.5],
                location: Point::new(rng.random::<f64>(), rng.random::<f64>()),
            })
            .collect();
        let priors = Priors::vague(1, 0, GaussianPrior::new((0.5f64).ln(), 0.3).unwrap());
        PosteriorContext::new(grid, Observations::Count(records), exp_family(), priors).unwrap()
    }

    #[test]
    fn block_constants_follow_the_dimension_formulas() {
        let s = ProposalScalings::new(
            DMatrix::identity(6, 6),
            DMatrix::identity(2, 2),
            vec![1.0; 64],
            None,
        )
        .unwrap();
        assert!((s.h2_bo() - 1.65 * 1.65 / 6f64.cbrt()).abs() < 1e-12);
        assert!((s.h2_bo() - 1.498).abs() < 1e-3);
        assert!((s.h2_eta() - 2.832).abs() < 5e-4);
        assert!((s.h2_gamma() - 1.65 * 1.65 / 4.0).abs() < 1e-12);
        assert!((s.c() - 0.4).abs() == 0.0);

        // Frailties join the field block, enlarging its dimension.
        let s = ProposalScalings::new(
            DMatrix::identity(6, 6),
            DMatrix::identity(2, 2),
            vec![1.0; 64],
            Some(vec![1.0; 36]),
        )
        .unwrap();
        assert!((s.h2_gamma() - 1.65 * 1.65 / 100f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn scalings_reject_degenerate_preconditioners() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(ProposalScalings::new(
            asym,
            DMatrix::identity(2, 2),
            vec![],
            None
        )
        .is_err());
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ProposalScalings::new(
            DMatrix::identity(2, 2),
            not_pd,
            vec![],
            None
        )
        .is_err());
        assert!(ProposalScalings::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            vec![1.0, -0.1],
            None
        )
        .is_err());
    }

    #[test]
    fn adaptation_has_a_fixed_point_and_monotone_response() {
        let mut s = toy_scalings();
        let target = 0.574;
        adapt(&mut s, target, 10, target, 0.6);
        assert_eq!(s.h(), 1.0);

        let mut h_prev = s.h();
        for i in 1..50 {
            adapt(&mut s, 0.0, i, target, 0.6);
            assert!(s.h() < h_prev);
            h_prev = s.h();
        }
        let mut s = toy_scalings();
        let mut h_prev = s.h();
        for i in 1..50 {
            adapt(&mut s, 1.0, i, target, 0.6);
            assert!(s.h() > h_prev);
            h_prev = s.h();
        }

        // The scale is bounded on both sides.
        let mut s = toy_scalings();
        for _ in 0..100_000 {
            adapt(&mut s, 0.0, 1, target, 0.6);
        }
        assert_eq!(s.h(), 1e-6);
        for _ in 0..100_000 {
            adapt(&mut s, 1.0, 1, target, 0.6);
        }
        assert_eq!(s.h(), 1e3);
    }

    #[test]
    fn adaptation_gains_diminish_but_never_exhaust() {
        // Partial sums of i^{-0.6} keep growing by large increments while
        // the squared-gain increments shrink toward zero: the divergent-sum,
        // finite-square-sum schedule the scheme requires.
        let exponent = 0.6;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut sum_at = [0.0; 3];
        let mut sum_sq_at = [0.0; 3];
        let checkpoints = [100_000usize, 200_000, 400_000];
        let mut c = 0;
        for i in 1..=400_000usize {
            let g = adaptation_gain(i, exponent);
            sum += g;
            sum_sq += g * g;
            if i == checkpoints[c] {
                sum_at[c] = sum;
                sum_sq_at[c] = sum_sq;
                if c < 2 {
                    c += 1;
                }
            }
        }
        let grow1 = sum_at[1] - sum_at[0];
        let grow2 = sum_at[2] - sum_at[1];
        assert!(grow1 > 10.0 && grow2 > grow1);
        let sq1 = sum_sq_at[1] - sum_sq_at[0];
        let sq2 = sum_sq_at[2] - sum_sq_at[1];
        assert!(sq2 < sq1 && sq1 < 0.1, "squared-gain increments {sq1} {sq2}");
    }

    #[test]
    fn zero_gradients_make_the_proposal_symmetric() {
        // With all gradients zero the Langevin drift vanishes and the
        // proposal ratio is exactly zero.
        let flat = |p: &ParameterState| -> Result<Evaluation> {
            Ok(Evaluation {
                log_posterior: 0.0,
                field: vec![],
                grad_beta_omega: vec![0.0; p.beta.len()],
                grad_gamma: vec![0.0; p.gamma.len()],
                grad_u: None,
            })
        };
        let mut params = toy_state();
        params.gamma = vec![0.0; 5];
        let eval = flat(&params).unwrap();
        let chain = ChainState { params, eval };
        let s = ProposalScalings::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            vec![0.7; 5],
            None,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let prop = propose(&chain, &s, &mut rng);
            let cand_eval = flat(&prop.params).unwrap();
            assert_eq!(log_q_ratio(&s, &prop, &chain.eval, &cand_eval), 0.0);
        }
    }

    #[test]
    fn covariance_parameter_walk_ignores_gradients() {
        // The eta block must not drift however large the other gradients
        // are; its sample mean stays at the current value.
        let target = toy_target([50.0, -50.0], [[1.0, 0.0], [0.0, 1.0]]);
        let chain = toy_chain(&target);
        let s = toy_scalings();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let mut mean = [0.0, 0.0];
        for _ in 0..n {
            let prop = propose(&chain, &s, &mut rng);
            mean[0] += prop.params.eta_t[0];
            mean[1] += prop.params.eta_t[1];
        }
        let sd = (s.c() * s.h2_eta()).sqrt();
        let tol = 4.0 * sd / (n as f64).sqrt();
        assert!((mean[0] / n as f64).abs() < tol);
        assert!((mean[1] / n as f64).abs() < tol);
    }

    #[test]
    fn near_zero_noise_accepts_and_impossible_candidates_reject() {
        let target = toy_target([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]);
        let mut chain = toy_chain(&target);
        let mut s = toy_scalings();
        s.set_h(1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = advance_with(&target, &mut chain, &s, 1, &mut rng);
            assert_eq!(r.accepted, Some(0));
        }

        // A target that vanishes everywhere but the starting point.
        let wall = |p: &ParameterState| {
            let at_origin = p.beta.iter().all(|b| *b == 0.0);
            Ok(Evaluation {
                log_posterior: if at_origin { 0.0 } else { f64::NEG_INFINITY },
                field: vec![],
                grad_beta_omega: vec![0.0; p.beta.len()],
                grad_gamma: vec![],
                grad_u: None,
            })
        };
        let mut chain = toy_chain(&wall);
        let mut s = toy_scalings();
        s.set_h(1.0);
        for _ in 0..200 {
            let r = advance_with(&wall, &mut chain, &s, 3, &mut rng);
            assert_eq!(r.accepted, None);
            assert_eq!(r.mean_indicator, 0.0);
        }
        assert_eq!(chain.params.beta, vec![0.0, 0.0]);

        // Evaluation errors behave like vanishing density, not aborts.
        let faulty = |p: &ParameterState| -> Result<Evaluation> {
            if p.beta.iter().all(|b| *b == 0.0) {
                wall(p)
            } else {
                Err(Error::numerical("off the manifold"))
            }
        };
        let mut chain = toy_chain(&faulty);
        for _ in 0..50 {
            let r = advance_with(&faulty, &mut chain, &s, 2, &mut rng);
            assert_eq!(r.accepted, None);
        }
    }

    #[test]
    fn flat_target_accepts_every_candidate_and_keeps_the_first() {
        let flat = |p: &ParameterState| {
            Ok(Evaluation {
                log_posterior: 0.0,
                field: vec![],
                grad_beta_omega: vec![0.0; p.beta.len()],
                grad_gamma: vec![],
                grad_u: None,
            })
        };
        let mut chain = toy_chain(&flat);
        let s = toy_scalings();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut reference = chain.clone();
        let mut rng_ref = rng.clone();
        let r = advance_with(&flat, &mut chain, &s, 4, &mut rng);
        assert_eq!(r.accepted, Some(0));
        assert_eq!(r.mean_indicator, 1.0);
        // The winning candidate is exactly the one the k=1 step would take.
        let r1 = advance_with(&flat, &mut reference, &s, 1, &mut rng_ref);
        assert_eq!(r1.accepted, Some(0));
        assert_eq!(chain.params.beta, reference.params.beta);
    }

    #[test]
    fn adaptation_drives_acceptance_to_the_target() {
        let target = toy_target([0.3, -0.7], [[1.5625, -0.9375], [-0.9375, 1.5625]]);
        let mut chain = toy_chain(&target);
        let mut s = toy_scalings();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let total = 100_000usize;
        let mut hits = 0.0;
        let mut late_hits = 0.0;
        for i in 1..=total {
            let r = advance_with(&target, &mut chain, &s, 1, &mut rng);
            adapt(&mut s, r.mean_indicator, i, 0.574, 0.6);
            hits += r.mean_indicator;
            if i > total / 2 {
                late_hits += r.mean_indicator;
            }
        }
        let running = hits / total as f64;
        let late = late_hits / (total / 2) as f64;
        assert!((late - 0.574).abs() < 0.05, "late acceptance {late}");
        assert!((0.524..=0.624).contains(&running), "running acceptance {running}");
    }

    #[test]
    fn chain_reproduces_a_tractable_gaussian_target() {
        // Detailed-balance smoke test: moments of the retained samples match
        // the known target within Monte Carlo error.
        let mu = [0.3, -0.7];
        let prec = [[1.5625, -0.9375], [-0.9375, 1.5625]];
        let target = toy_target(mu, prec);
        let mut chain = toy_chain(&target);
        let mut s = toy_scalings();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in 1..=20_000usize {
            let r = advance_with(&target, &mut chain, &s, 1, &mut rng);
            adapt(&mut s, r.mean_indicator, i, 0.574, 0.6);
        }
        let n = 100_000usize;
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        let mut sum_xy = 0.0f64;
        for _ in 0..n {
            advance_with(&target, &mut chain, &s, 1, &mut rng);
            let b = &chain.params.beta;
            sum[0] += b[0];
            sum[1] += b[1];
            sum_sq[0] += b[0] * b[0];
            sum_sq[1] += b[1] * b[1];
            sum_xy += b[0] * b[1];
        }
        let mean = [sum[0] / n as f64, sum[1] / n as f64];
        let var = [
            sum_sq[0] / n as f64 - mean[0] * mean[0],
            sum_sq[1] / n as f64 - mean[1] * mean[1],
        ];
        let cov = sum_xy / n as f64 - mean[0] * mean[1];
        // Target covariance is [[1, 0.6], [0.6, 1]].
        assert!((mean[0] - mu[0]).abs() < 0.05, "mean {mean:?}");
        assert!((mean[1] - mu[1]).abs() < 0.05, "mean {mean:?}");
        assert!((var[0] - 1.0).abs() < 0.1, "var {var:?}");
        assert!((var[1] - 1.0).abs() < 0.1, "var {var:?}");
        assert!((cov - 0.6).abs() < 0.1, "cov {cov}");
    }

    fn ks_p_value(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (na, nb) = (a.len(), b.len());
        let (mut i, mut j) = (0usize, 0usize);
        let mut d = 0.0f64;
        while i < na && j < nb {
            let x = a[i].min(b[j]);
            while i < na && a[i] <= x {
                i += 1;
            }
            while j < nb && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
        }
        let ne = (na as f64 * nb as f64) / (na + nb) as f64;
        let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            p += 2.0 * sign * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn multi_candidate_chain_matches_single_candidate_marginals() {
        let mu = [0.3, -0.7];
        let prec = [[1.5625, -0.9375], [-0.9375, 1.5625]];
        let target = toy_target(mu, prec);
        let run = |k: usize, seed: u64| -> Vec<f64> {
            let mut chain = toy_chain(&target);
            let mut s = toy_scalings();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 1..=20_000usize {
                let r = advance_with(&target, &mut chain, &s, k, &mut rng);
                adapt(&mut s, r.mean_indicator, i, 0.574, 0.6);
            }
            let mut out = Vec::with_capacity(10_000);
            for t in 0..100_000usize {
                advance_with(&target, &mut chain, &s, k, &mut rng);
                if t % 10 == 9 {
                    out.push(chain.params.beta[0]);
                }
            }
            out
        };
        let single = run(1, 101);
        let multi = run(4, 202);
        let p = ks_p_value(&single, &multi);
        assert!(p > 0.01, "KS p-value {p}");
    }

    #[test]
    fn multi_candidate_moves_more_often() {
        // With per-candidate acceptance near 0.574, eight candidates should
        // move the chain nearly every iteration.
        let target = toy_target([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]);
        let mut chain = toy_chain(&target);
        let mut s = toy_scalings();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for i in 1..=20_000usize {
            let r = advance_with(&target, &mut chain, &s, 1, &mut rng);
            adapt(&mut s, r.mean_indicator, i, 0.574, 0.6);
        }
        let n = 20_000usize;
        let mut moved = 0usize;
        let mut indicator = 0.0;
        for _ in 0..n {
            let r = advance_with(&target, &mut chain, &s, 8, &mut rng);
            if r.accepted.is_some() {
                moved += 1;
            }
            indicator += r.mean_indicator;
        }
        let move_rate = moved as f64 / n as f64;
        let per_candidate = indicator / n as f64;
        let expected = 1.0 - (1.0 - per_candidate).powi(8);
        assert!(move_rate > 0.95, "move rate {move_rate}");
        assert!((move_rate - expected).abs() < 0.02, "{move_rate} vs {expected}");
    }

    #[test]
    fn single_candidate_parallel_step_is_bitwise_mh() {
        let ctx = small_count_ctx();
        let (params, s) = initialize(&ctx).unwrap();
        let mut a = ChainState::new(&ctx, params.clone()).unwrap();
        let mut b = ChainState::new(&ctx, params).unwrap();
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let ra = mh_step(&ctx, &mut a, &s, &mut rng_a);
            let rb = parallel_propose(&ctx, &mut b, &s, 1, &mut rng_b);
            assert_eq!(ra.accepted, rb.accepted);
            assert_eq!(a.params.beta, b.params.beta);
            assert_eq!(a.params.eta_t, b.params.eta_t);
            assert_eq!(a.params.gamma, b.params.gamma);
            assert_eq!(a.eval.log_posterior, b.eval.log_posterior);
        }
    }

    #[test]
    fn stage1_recovers_a_closed_form_maximum_likelihood_estimate() {
        // Two events at times (r, 1) and two censorings at time 1, with r
        // chosen so the shape score vanishes at alpha = 1: the joint MLE is
        // then exactly the exponential-model closed form
        // lambda = (number of events) / (total time at risk).
        let mut lo = 10.0f64;
        let mut hi = 30.0f64;
        let g = |r: f64| (r - 3.0) * r.ln() - 2.0 * (r + 3.0);
        assert!(g(lo) < 0.0 && g(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);

        let grid = Grid::from_bbox(Rect::new(0.0, 0.0, 1.0, 1.0), 1, 1, 2.0).unwrap();
        let record = |id: usize, censoring: Censoring| SurvivalRecord {
            id: id.to_string(),
            censoring,
            covariates: vec![],
            location: Point::new(0.5, 0.5),
        };
        let records = vec![
            record(0, Censoring::Uncensored { t: r }),
            record(1, Censoring::Uncensored { t: 1.0 }),
            record(2, Censoring::Right { t: 1.0 }),
            record(3, Censoring::Right { t: 1.0 }),
        ];
        let priors = Priors::vague(0, 2, GaussianPrior::new(0.0, 0.3).unwrap());
        let ctx =
            PosteriorContext::new(grid, Observations::Survival(records), exp_family(), priors).unwrap();
        let bo = stage1_mle(&ctx).unwrap();
        let alpha = bo[0].exp();
        let lambda = bo[1].exp();
        let lambda_closed_form = 2.0 / (r + 3.0);
        assert!((alpha - 1.0).abs() < 1e-6, "alpha {alpha}");
        assert!((lambda - lambda_closed_form).abs() < 1e-6, "lambda {lambda}");
    }

    #[test]
    fn stage2_solves_the_uncensored_stationarity_equation() {
        let grid = Grid::from_bbox(Rect::new(0.0, 0.0, 1.0, 1.0), 2, 2, 2.0).unwrap();
        let records = vec![SurvivalRecord {
            id: "0".into(),
            censoring: Censoring::Uncensored { t: 3.0 },
            covariates: vec![],
            location: Point::new(0.1, 0.1),
        }];
        let priors = Priors::vague(0, 2, GaussianPrior::new(0.0, 0.3).unwrap());
        let ctx =
            PosteriorContext::new(grid, Observations::Survival(records), exp_family(), priors).unwrap();
        let omega = [(0.9f64).ln(), (0.3f64).ln()];
        let y = stage2_field(&ctx, &[], &omega);
        let expected = -(0.3 * 3f64.powf(0.9)).ln();
        // One record: its cell takes the solution, every other cell takes
        // the overall mean, which is the same single value.
        for v in &y {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn stage2_interval_root_is_stationary() {
        let b = WeibullBaseline { alpha: 1.3, lambda: 0.2 };
        let eta = interval_eta_root(&b, 2.0, 5.0).unwrap();
        let record = SurvivalRecord {
            id: "0".into(),
            censoring: Censoring::Interval { t1: 2.0, t2: 5.0 },
            covariates: vec![],
            location: Point::new(0.0, 0.0),
        };
        let score = record_dloglik_deta(&record, &b, eta).unwrap();
        assert!(score.abs() < 1e-9, "score {score}");
    }

    #[test]
    fn stage2_skips_records_without_a_finite_maximizer() {
        let grid = Grid::from_bbox(Rect::new(0.0, 0.0, 1.0, 1.0), 2, 2, 2.0).unwrap();
        let records = vec![
            SurvivalRecord {
                id: "0".into(),
                censoring: Censoring::Right { t: 2.0 },
                covariates: vec![],
                location: Point::new(0.1, 0.1),
            },
            SurvivalRecord {
                id: "1".into(),
                censoring: Censoring::Left { t: 2.0 },
                covariates: vec![],
                location: Point::new(0.2, 0.2),
            },
        ];
        let priors = Priors::vague(0, 2, GaussianPrior::new(0.0, 0.3).unwrap());
        let ctx =
            PosteriorContext::new(grid, Observations::Survival(records), exp_family(), priors).unwrap();
        let y = stage2_field(&ctx, &[], &[0.0, 0.0]);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stage3_falls_back_to_the_prior_when_no_scale_is_positive_definite() {
        // An exponential model whose range parameter matches the window
        // width on a doubled embedding is not positive definite, at any
        // variance; the whole lattice fails and the initializer must fall
        // back to the prior.
        let grid = Grid::from_bbox(Rect::new(0.0, 0.0, 1.0, 1.0), 3, 3, 2.0).unwrap();
        let records = vec![
            SurvivalRecord {
                id: "0".into(),
                censoring: Censoring::Uncensored { t: 1.0 },
                covariates: vec![],
                location: Point::new(0.2, 0.2),
            },
            SurvivalRecord {
                id: "1".into(),
                censoring: Censoring::Uncensored { t: 2.0 },
                covariates: vec![],
                location: Point::new(0.8, 0.8),
            },
            SurvivalRecord {
                id: "2".into(),
                censoring: Censoring::Right { t: 1.5 },
                covariates: vec![],
                location: Point::new(0.5, 0.5),
            },
        ];
        let priors = Priors::vague(0, 2, GaussianPrior::new(0.0, 1e-3).unwrap());
        let ctx =
            PosteriorContext::new(grid, Observations::Survival(records), exp_family(), priors).unwrap();
        let (state, scalings) = initialize(&ctx).unwrap();
        assert_eq!(state.eta_t[1], 0.0);
        assert_eq!(state.eta_t[0], ctx.priors().log_sigma.mean);
        let se = scalings.sigma_eta();
        assert!((se[(0, 0)] - ctx.priors().log_sigma.variance()).abs() < 1e-15);
        assert!((se[(1, 1)] - ctx.priors().log_phi.variance()).abs() < 1e-15);

        // The starting state itself is invalid, which the runner surfaces.
        let config = ChainConfig::new(10, 1, 1, 1);
        match run_chain(&config, &ctx) {
            Err(Error::NonPositiveDefinite { .. }) => {}
            other => panic!("expected a non-positive-definite error, got {other:?}"),
        }
    }

    #[test]
    fn initializer_produces_usable_scalings() {
        let ctx = small_survival_ctx();
        let (state, scalings) = initialize(&ctx).unwrap();
        assert!(state.is_finite());
        assert!(state.gamma.iter().all(|g| *g == 0.0));

        // Stage 1 left a stationary likelihood in (beta, omega).
        let bo: Vec<f64> =
            state.beta.iter().chain(state.omega_t.iter()).copied().collect();
        let obs = ctx.observations();
        let Observations::Survival(records) = obs else { unreachable!() };
        let b = WeibullBaseline::from_log(&bo[1..]);
        let mut grad = [0.0f64; 3];
        for r in records {
            let eta = r.covariates[0] * bo[0];
            grad[0] += record_dloglik_deta(r, &b, eta).unwrap() * r.covariates[0];
            let dw = record_dloglik_domega(r, &b, eta).unwrap();
            grad[1] += dw[0];
            grad[2] += dw[1];
        }
        for g in grad {
            assert!(g.abs() < 1e-6, "stage-1 gradient {grad:?}");
        }

        // Preconditioners are usable: positive diagonals, data-informed
        // cells tightened below the unit prior scale.
        assert!(scalings.sigma_gamma().iter().all(|v| *v > 0.0 && *v <= 1.0 + 1e-9));
        assert!(scalings.sigma_gamma().iter().any(|v| *v < 1.0 - 1e-6));
        assert!(scalings.sigma_bo().nrows() == 3);
        for k in 0..3 {
            assert!(scalings.sigma_bo()[(k, k)] > 0.0);
        }
    }

    #[test]
    fn chain_is_deterministic_and_retention_follows_the_arithmetic() {
        let ctx = small_count_ctx();
        let mut config = ChainConfig::new(240, 40, 20, 99);
        config.initial_h = 0.5;
        let a = run_chain(&config, &ctx).unwrap();
        let b = run_chain(&config, &ctx).unwrap();
        assert_eq!(a.samples.len(), 10);
        assert_eq!(a.log_posterior.len(), 10);
        assert_eq!(a.acceptance_rate.len(), 10);
        assert_eq!(a.log_posterior, b.log_posterior);
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.beta, sb.beta);
            assert_eq!(sa.eta_t, sb.eta_t);
            assert_eq!(sa.field, sb.field);
        }
        assert_eq!(a.scalings.h(), b.scalings.h());

        // Retaining exactly one sample when thin spans the whole tail.
        let config = ChainConfig::new(60, 30, 30, 99);
        let out = run_chain(&config, &ctx).unwrap();
        assert_eq!(out.samples.len(), 1);

        // The retained field is the latent surface, not whitened noise: it
        // carries the -sigma^2/2 centering.
        let last = out.samples.last().unwrap();
        assert_eq!(last.field.len(), ctx.grid().m());
    }

    #[test]
    fn config_validation_rejects_inconsistent_settings() {
        assert!(ChainConfig::new(0, 0, 1, 1).validate().is_err());
        assert!(ChainConfig::new(10, 10, 1, 1).validate().is_err());
        assert!(ChainConfig::new(10, 2, 0, 1).validate().is_err());
        let mut c = ChainConfig::new(10, 2, 1, 1);
        c.n_workers = 0;
        assert!(c.validate().is_err());
        let mut c = ChainConfig::new(10, 2, 1, 1);
        c.adapt_exponent = 0.5;
        assert!(c.validate().is_err());
        let mut c = ChainConfig::new(10, 2, 1, 1);
        c.adapt_exponent = 1.0;
        assert!(c.validate().is_ok());
    }
}
