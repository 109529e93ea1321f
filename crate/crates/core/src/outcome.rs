//! Per-record outcome likelihoods: the Weibull proportional-hazards
//! survival model with four censoring types, and the Poisson count model.
//!
//! Each outcome exposes its log-likelihood contribution and the exact
//! derivatives with respect to the linear predictor `eta` and the log
//! baseline parameters, which the Langevin proposals need. Censored
//! contributions are computed through `expm1`-based forms so that
//! differences of survival probabilities stay accurate when `exp(eta) * H0`
//! is very large or very small.

use crate::error::Error;
use crate::grid::Point;
use crate::special::ln_gamma;
use crate::Result;

/// Censoring status, carrying the observed time(s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Censoring {
    /// Event observed exactly at `t`.
    Uncensored { t: f64 },
    /// Event known to occur after `t`.
    Right { t: f64 },
    /// Event known to occur before `t`.
    Left { t: f64 },
    /// Event known to occur inside `(t1, t2)`.
    Interval { t1: f64, t2: f64 },
}

/// One individual's survival outcome, covariates, and location.
#[derive(Debug, Clone)]
pub struct SurvivalRecord {
    pub id: String,
    pub censoring: Censoring,
    pub covariates: Vec<f64>,
    pub location: Point,
}

/// One count outcome, covariates, and location.
#[derive(Debug, Clone)]
pub struct CountRecord {
    pub id: String,
    pub z: u64,
    pub covariates: Vec<f64>,
    pub location: Point,
}

impl SurvivalRecord {
    pub fn validate(&self) -> Result<()> {
        let ok_time = |t: f64| t.is_finite() && t > 0.0;
        let times_ok = match self.censoring {
            Censoring::Uncensored { t } | Censoring::Right { t } | Censoring::Left { t } => {
                ok_time(t)
            }
            Censoring::Interval { t1, t2 } => ok_time(t1) && ok_time(t2) && t1 < t2,
        };
        if !times_ok {
            return Err(Error::validation(format!(
                "record {}: times must be positive and finite, with t1 < t2 for interval \
                 censoring ({:?})",
                self.id, self.censoring
            )));
        }
        validate_common(&self.id, &self.covariates, self.location)
    }
}

impl CountRecord {
    pub fn validate(&self) -> Result<()> {
        validate_common(&self.id, &self.covariates, self.location)
    }
}

fn validate_common(id: &str, covariates: &[f64], location: Point) -> Result<()> {
    if covariates.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(format!("record {id}: non-finite covariate")));
    }
    if !location.is_finite() {
        return Err(Error::validation(format!("record {id}: non-finite location")));
    }
    Ok(())
}

/// A dataset of one outcome type.
#[derive(Debug, Clone)]
pub enum Observations {
    Survival(Vec<SurvivalRecord>),
    Count(Vec<CountRecord>),
}

impl Observations {
    pub fn len(&self) -> usize {
        match self {
            Observations::Survival(r) => r.len(),
            Observations::Count(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn location(&self, i: usize) -> Point {
        match self {
            Observations::Survival(r) => r[i].location,
            Observations::Count(r) => r[i].location,
        }
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        match self {
            Observations::Survival(r) => &r[i].covariates,
            Observations::Count(r) => &r[i].covariates,
        }
    }

    /// Number of baseline parameters the outcome carries: two (log shape,
    /// log rate) for the Weibull survival model, none for Poisson counts.
    pub fn n_omega(&self) -> usize {
        match self {
            Observations::Survival(_) => 2,
            Observations::Count(_) => 0,
        }
    }

    /// Validates every record and the consistency of covariate dimensions.
    pub fn validate(&self) -> Result<usize> {
        if self.is_empty() {
            return Ok(0);
        }
        let p = self.covariates(0).len();
        for i in 0..self.len() {
            if self.covariates(i).len() != p {
                return Err(Error::validation(format!(
                    "record {i}: expected {p} covariates, found {}",
                    self.covariates(i).len()
                )));
            }
            match self {
                Observations::Survival(r) => r[i].validate()?,
                Observations::Count(r) => r[i].validate()?,
            }
        }
        Ok(p)
    }
}

/// Weibull baseline hazard `h0(t) = alpha * lambda * t^(alpha - 1)` with
/// cumulative hazard `H0(t) = lambda * t^alpha`.
#[derive(Debug, Clone, Copy)]
pub struct WeibullBaseline {
    pub alpha: f64,
    pub lambda: f64,
}

impl WeibullBaseline {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0 && lambda.is_finite() && lambda > 0.0) {
            return Err(Error::validation(format!(
                "Weibull parameters must be positive, got alpha={alpha}, lambda={lambda}"
            )));
        }
        Ok(WeibullBaseline { alpha, lambda })
    }

    /// From the sampling scale `(log alpha, log lambda)`.
    pub fn from_log(omega_t: &[f64]) -> Self {
        WeibullBaseline { alpha: omega_t[0].exp(), lambda: omega_t[1].exp() }
    }

    /// Baseline hazard at `t >= 0` (infinite at `t = 0` when `alpha < 1`).
    pub fn hazard(&self, t: f64) -> f64 {
        assert!(t >= 0.0, "hazard requires t >= 0, got {t}");
        self.alpha * self.lambda * t.powf(self.alpha - 1.0)
    }

    /// Baseline cumulative hazard at `t >= 0`; zero at zero, nondecreasing.
    pub fn cum_hazard(&self, t: f64) -> f64 {
        assert!(t >= 0.0, "cum_hazard requires t >= 0, got {t}");
        self.lambda * t.powf(self.alpha)
    }

    /// Inverse cumulative hazard: the `t` with `cum_hazard(t) = x`.
    pub fn inv_cum_hazard(&self, x: f64) -> f64 {
        assert!(x >= 0.0);
        (x / self.lambda).powf(1.0 / self.alpha)
    }
}

/// `x / expm1(x)`: smooth on `[0, inf]` with limits 1 at 0 and 0 at
/// infinity; the common factor in censored-likelihood derivatives.
pub(crate) fn ratio_expm1(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x == 0.0 {
        1.0
    } else if x == f64::INFINITY {
        0.0
    } else {
        x / x.exp_m1()
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite linear predictor {eta}")))
    }
}

/// Log-likelihood contribution of one survival record at linear predictor
/// `eta`, so that the record's hazard is `exp(eta) * h0(t)`.
///
/// May return negative infinity for a candidate state assigning the record
/// zero probability; returns an error when the interval contribution is
/// model-degenerate (`H0(t1) = H0(t2)`).
pub fn record_loglik(r: &SurvivalRecord, b: &WeibullBaseline, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    let ee = eta.exp();
    match r.censoring {
        Censoring::Uncensored { t } => {
            Ok(eta + b.hazard(t).ln() - ee * b.cum_hazard(t))
        }
        Censoring::Right { t } => Ok(-ee * b.cum_hazard(t)),
        Censoring::Left { t } => {
            // log F(t) = log(1 - exp(-v)).
            let v = ee * b.cum_hazard(t);
            Ok((-(-v).exp_m1()).ln())
        }
        Censoring::Interval { t1, t2 } => {
            // log[F(t2) - F(t1)] = -v1 + log(1 - exp(-(v2 - v1))), with the
            // gap v2 - v1 computed directly from the hazard difference so
            // large v1, v2 never cancel.
            let v1 = ee * b.cum_hazard(t1);
            let delta = ee * (b.cum_hazard(t2) - b.cum_hazard(t1));
            if !(delta > 0.0) {
                return Err(Error::numerical(format!(
                    "degenerate interval contribution for record {}: H0({t1}) = H0({t2})",
                    r.id
                )));
            }
            Ok(-v1 + (-(-delta).exp_m1()).ln())
        }
    }
}

/// Exact derivative of [`record_loglik`] with respect to `eta`.
pub fn record_dloglik_deta(r: &SurvivalRecord, b: &WeibullBaseline, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    let ee = eta.exp();
    match r.censoring {
        Censoring::Uncensored { t } => Ok(1.0 - ee * b.cum_hazard(t)),
        Censoring::Right { t } => Ok(-ee * b.cum_hazard(t)),
        Censoring::Left { t } => Ok(ratio_expm1(ee * b.cum_hazard(t))),
        Censoring::Interval { t1, t2 } => {
            let v1 = ee * b.cum_hazard(t1);
            let delta = ee * (b.cum_hazard(t2) - b.cum_hazard(t1));
            if !(delta > 0.0) {
                return Err(Error::numerical(format!(
                    "degenerate interval contribution for record {}",
                    r.id
                )));
            }
            Ok(ratio_expm1(delta) - v1)
        }
    }
}

/// [`record_loglik`] and [`record_dloglik_deta`] together, sharing the
/// exponential and cumulative-hazard evaluations both need. The hot loops
/// that walk every record per iteration want both values anyway.
pub fn record_loglik_with_deta(
    r: &SurvivalRecord,
    b: &WeibullBaseline,
    eta: f64,
) -> Result<(f64, f64)> {
    check_eta(eta)?;
    let ee = eta.exp();
    match r.censoring {
        Censoring::Uncensored { t } => {
            let v = ee * b.cum_hazard(t);
            Ok((eta + b.hazard(t).ln() - v, 1.0 - v))
        }
        Censoring::Right { t } => {
            let v = ee * b.cum_hazard(t);
            Ok((-v, -v))
        }
        Censoring::Left { t } => {
            let v = ee * b.cum_hazard(t);
            Ok(((-(-v).exp_m1()).ln(), ratio_expm1(v)))
        }
        Censoring::Interval { t1, t2 } => {
            let v1 = ee * b.cum_hazard(t1);
            let delta = ee * (b.cum_hazard(t2) - b.cum_hazard(t1));
            if !(delta > 0.0) {
                return Err(Error::numerical(format!(
                    "degenerate interval contribution for record {}: H0({t1}) = H0({t2})",
                    r.id
                )));
            }
            Ok((-v1 + (-(-delta).exp_m1()).ln(), ratio_expm1(delta) - v1))
        }
    }
}

/// Exact derivatives of [`record_loglik`] with respect to
/// `(log alpha, log lambda)`.
pub fn record_dloglik_domega(
    r: &SurvivalRecord,
    b: &WeibullBaseline,
    eta: f64,
) -> Result<[f64; 2]> {
    check_eta(eta)?;
    let ee = eta.exp();
    // d v / d log(alpha) = v * alpha * ln t; d v / d log(lambda) = v.
    match r.censoring {
        Censoring::Uncensored { t } => {
            let v = ee * b.cum_hazard(t);
            let at = b.alpha * t.ln();
            Ok([1.0 + at - v * at, 1.0 - v])
        }
        Censoring::Right { t } => {
            let v = ee * b.cum_hazard(t);
            Ok([-v * b.alpha * t.ln(), -v])
        }
        Censoring::Left { t } => {
            let v = ee * b.cum_hazard(t);
            let r1 = ratio_expm1(v);
            Ok([r1 * b.alpha * t.ln(), r1])
        }
        Censoring::Interval { t1, t2 } => {
            let v1 = ee * b.cum_hazard(t1);
            let v2 = ee * b.cum_hazard(t2);
            let delta = ee * (b.cum_hazard(t2) - b.cum_hazard(t1));
            if !(delta > 0.0) {
                return Err(Error::numerical(format!(
                    "degenerate interval contribution for record {}",
                    r.id
                )));
            }
            let da = v2 * b.alpha * t2.ln() - v1 * b.alpha * t1.ln();
            let frac = if delta.is_finite() { 1.0 / delta.exp_m1() } else { 0.0 };
            Ok([-v1 * b.alpha * t1.ln() + da * frac, ratio_expm1(delta) - v1])
        }
    }
}

/// Log factorial via log-gamma; the per-record constant of the Poisson
/// likelihood, cached by the posterior.
pub fn ln_factorial(z: u64) -> f64 {
    if z <= 1 {
        0.0
    } else {
        ln_gamma(z as f64 + 1.0)
    }
}

/// Poisson log-likelihood `z * eta - exp(eta) - log(z!)` for a count `z`
/// with mean `exp(eta)`. Negative counts are unrepresentable by type.
pub fn poisson_loglik(z: u64, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(poisson_loglik_cached(z, eta, ln_factorial(z)))
}

/// [`poisson_loglik`] with the record's `log(z!)` precomputed.
pub fn poisson_loglik_cached(z: u64, eta: f64, ln_z_factorial: f64) -> f64 {
    z as f64 * eta - eta.exp() - ln_z_factorial
}

/// Exact derivative of the Poisson log-likelihood with respect to `eta`.
pub fn poisson_dloglik_deta(z: u64, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(z as f64 - eta.exp())
}
