//! Posterior summaries of retained chains: multiplicative-risk surfaces
//! with exceedance maps, pointwise credible bands for the baseline hazard
//! and the covariance function, and convergence diagnostics.

use crate::covariance::CovarianceModel;
use crate::error::Error;
use crate::grid::Grid;
use crate::mcmc::ChainOutput;
use crate::posterior::Priors;
use crate::Result;

/// Exceedance thresholds reported by default (multiples of the baseline
/// risk).
pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.2, 1.5, 2.0];

/// Per-cell posterior summary of the multiplicative risk exp(Y).
#[derive(Debug, Clone)]
pub struct FieldSummary {
    /// Grid indices of the summarized cells, ascending.
    pub cells: Vec<usize>,
    /// Per-cell Monte Carlo mean of exp(Y).
    pub mean: Vec<f64>,
    /// Per-cell (2.5%, 50%, 97.5%) quantiles of exp(Y).
    pub quantiles: Vec<[f64; 3]>,
    pub thresholds: Vec<f64>,
    /// `exceedance[k][j]`: fraction of samples with exp(Y) above
    /// `thresholds[j]` at `cells[k]`.
    pub exceedance: Vec<Vec<f64>>,
}

/// A pointwise credible band over a one-dimensional abscissa.
#[derive(Debug, Clone)]
pub struct CurveSummary {
    pub abscissae: Vec<f64>,
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Convergence diagnostics over the retained samples.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    /// The retained log-posterior trace, verbatim.
    pub log_posterior: Vec<f64>,
    /// Per-cell lag-1 autocorrelation of Y; `None` where the chain is
    /// constant and the autocorrelation is undefined.
    pub lag1: Vec<Option<f64>>,
    /// (2.5%, 50%, 97.5%) quantiles over the defined autocorrelations.
    pub lag1_quantiles: Option<[f64; 3]>,
    /// Per-parameter posterior histograms with prior overlays.
    pub histograms: Vec<ParameterHistogram>,
}

/// A posterior histogram for one scalar parameter, with the prior density
/// evaluated on a matching abscissa for overlay plots.
#[derive(Debug, Clone)]
pub struct ParameterHistogram {
    pub name: String,
    /// Bin edges, one more than the counts.
    pub breaks: Vec<f64>,
    pub counts: Vec<usize>,
    pub prior_x: Vec<f64>,
    pub prior_density: Vec<f64>,
}

/// Median-unbiased empirical quantile: with n sorted values and
/// h = (n + 1/3) p + 1/3, interpolates linearly between the values at
/// positions floor(h) and floor(h) + 1 (one-based), clamping h to [1, n].
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    assert!((0.0..=1.0).contains(&p), "probability out of range");
    let n = sorted.len();
    let h = ((n as f64 + 1.0 / 3.0) * p + 1.0 / 3.0).clamp(1.0, n as f64);
    let k = h.floor() as usize;
    let frac = h - k as f64;
    if k >= n {
        sorted[n - 1]
    } else {
        sorted[k - 1] + frac * (sorted[k] - sorted[k - 1])
    }
}

fn three_quantiles(sorted: &[f64]) -> [f64; 3] {
    [quantile(sorted, 0.025), quantile(sorted, 0.5), quantile(sorted, 0.975)]
}

/// Summarizes the multiplicative-risk surface exp(Y) over the retained
/// samples: per-cell means, quantiles, and exceedance probabilities for the
/// given thresholds. Covers the observation-window cells unless
/// `full_grid` asks for the whole torus.
pub fn summarize_field(
    chain: &ChainOutput,
    grid: &Grid,
    thresholds: &[f64],
    full_grid: bool,
) -> Result<FieldSummary> {
    let n = chain.samples.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "field summaries need at least 2 retained samples, got {n}"
        )));
    }
    if thresholds.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::validation("exceedance thresholds must be positive"));
    }
    for s in &chain.samples {
        if s.field.len() != grid.m() {
            return Err(Error::validation(format!(
                "retained field length {} does not match the grid's {} cells",
                s.field.len(),
                grid.m()
            )));
        }
    }

    let cells = if full_grid { (0..grid.m()).collect() } else { grid.obs_cells() };
    let mut mean = Vec::with_capacity(cells.len());
    let mut quantiles = Vec::with_capacity(cells.len());
    let mut exceedance = Vec::with_capacity(cells.len());
    let mut risks = vec![0.0f64; n];
    for &cell in &cells {
        for (i, s) in chain.samples.iter().enumerate() {
            risks[i] = s.field[cell].exp();
        }
        // Sorting first makes every statistic independent of sample order.
        risks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mean.push(risks.iter().sum::<f64>() / n as f64);
        quantiles.push(three_quantiles(&risks));
        exceedance.push(
            thresholds
                .iter()
                .map(|c| risks.iter().filter(|r| **r > *c).count() as f64 / n as f64)
                .collect(),
        );
    }
    Ok(FieldSummary { cells, mean, quantiles, thresholds: thresholds.to_vec(), exceedance })
}

fn check_abscissae(xs: &[f64], allow_zero: bool) -> Result<()> {
    let floor_ok = |x: f64| if allow_zero { x >= 0.0 } else { x > 0.0 };
    if xs.is_empty() || xs.iter().any(|x| !(x.is_finite() && floor_ok(*x))) {
        return Err(Error::validation("abscissae must be finite and non-empty"));
    }
    if xs.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::validation("abscissae must be sorted ascending"));
    }
    Ok(())
}

fn pointwise_band(
    abscissae: &[f64],
    n_samples: usize,
    mut value: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<CurveSummary> {
    if n_samples == 0 {
        return Err(Error::validation("credible bands need at least 1 retained sample"));
    }
    let mut lower = Vec::with_capacity(abscissae.len());
    let mut median = Vec::with_capacity(abscissae.len());
    let mut upper = Vec::with_capacity(abscissae.len());
    let mut column = vec![0.0f64; n_samples];
    for &x in abscissae {
        for (i, slot) in column.iter_mut().enumerate() {
            *slot = value(i, x)?;
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = three_quantiles(&column);
        lower.push(q[0]);
        median.push(q[1]);
        upper.push(q[2]);
    }
    Ok(CurveSummary { abscissae: abscissae.to_vec(), lower, median, upper })
}

/// Pointwise (2.5%, 50%, 97.5%) band of the baseline hazard over `times`.
pub fn baseline_hazard_band(chain: &ChainOutput, times: &[f64]) -> Result<CurveSummary> {
    check_abscissae(times, false)?;
    if chain.samples.iter().any(|s| s.omega_t.len() != 2) {
        return Err(Error::validation("baseline bands need Weibull parameters per sample"));
    }
    pointwise_band(times, chain.samples.len(), |i, t| {
        let s = &chain.samples[i];
        let alpha = s.omega_t[0].exp();
        let lambda = s.omega_t[1].exp();
        let h = alpha * lambda * t.powf(alpha - 1.0);
        if h.is_finite() {
            Ok(h)
        } else {
            Err(Error::numerical(format!("baseline hazard overflowed at t = {t}")))
        }
    })
}

/// Pointwise (2.5%, 50%, 97.5%) band of the covariance function over
/// `distances` (zero allowed: the band at 0 is the sill's posterior).
pub fn covariance_band(
    chain: &ChainOutput,
    family: &CovarianceModel,
    distances: &[f64],
) -> Result<CurveSummary> {
    check_abscissae(distances, true)?;
    pointwise_band(distances, chain.samples.len(), |i, d| {
        let s = &chain.samples[i];
        let sigma2 = (2.0 * s.eta_t[0]).exp();
        let phi = s.eta_t[1].exp();
        family.with_scale(sigma2, phi)?.value(d)
    })
}

fn lag1_autocorrelation(ys: &[f64]) -> Option<f64> {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let denom: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
    if denom <= 1e-300 {
        return None;
    }
    let num: f64 = ys.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    Some(num / denom)
}

fn histogram(name: &str, values: &[f64], prior: &crate::posterior::GaussianPrior) -> ParameterHistogram {
    let mut lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let bins = 30usize;
    let width = (hi - lo) / bins as f64;
    let breaks: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    // Overlay abscissa spans the data and the prior's bulk.
    let ox_lo = lo.min(prior.mean - 4.0 * prior.sd);
    let ox_hi = hi.max(prior.mean + 4.0 * prior.sd);
    let prior_x: Vec<f64> =
        (0..=100).map(|k| ox_lo + k as f64 * (ox_hi - ox_lo) / 100.0).collect();
    let prior_density = prior_x.iter().map(|x| prior.logpdf(*x).exp()).collect();
    ParameterHistogram {
        name: name.to_string(),
        breaks,
        counts,
        prior_x,
        prior_density,
    }
}

/// Convergence diagnostics: the retained log-posterior trace, per-cell
/// lag-1 autocorrelations of the field, and per-parameter histograms with
/// prior overlays.
pub fn diagnostics(chain: &ChainOutput, priors: &Priors) -> Result<Diagnostics> {
    let n = chain.samples.len();
    if n < 3 {
        return Err(Error::validation(format!(
            "diagnostics need at least 3 retained samples, got {n}"
        )));
    }
    let m = chain.samples[0].field.len();
    let mut lag1 = Vec::with_capacity(m);
    let mut column = vec![0.0f64; n];
    for cell in 0..m {
        for (i, s) in chain.samples.iter().enumerate() {
            column[i] = s.field[cell];
        }
        lag1.push(lag1_autocorrelation(&column));
    }
    let mut defined: Vec<f64> = lag1.iter().flatten().copied().collect();
    defined.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lag1_quantiles = if defined.is_empty() { None } else { Some(three_quantiles(&defined)) };

    let mut histograms = Vec::new();
    let p = chain.samples[0].beta.len();
    let n_omega = chain.samples[0].omega_t.len();
    let mut values = vec![0.0f64; n];
    for j in 0..p {
        for (i, s) in chain.samples.iter().enumerate() {
            values[i] = s.beta[j];
        }
        histograms.push(histogram(&format!("beta{j}"), &values, &priors.beta[j]));
    }
    let omega_names = ["log_alpha", "log_lambda"];
    for k in 0..n_omega {
        for (i, s) in chain.samples.iter().enumerate() {
            values[i] = s.omega_t[k];
        }
        histograms.push(histogram(omega_names[k], &values, &priors.omega_t[k]));
    }
    for (k, name) in ["log_sigma", "log_phi"].into_iter().enumerate() {
        for (i, s) in chain.samples.iter().enumerate() {
            values[i] = s.eta_t[k];
        }
        let prior = if k == 0 { &priors.log_sigma } else { &priors.log_phi };
        histograms.push(histogram(name, &values, prior));
    }

    Ok(Diagnostics {
        log_posterior: chain.log_posterior.clone(),
        lag1,
        lag1_quantiles,
        histograms,
    })
}
