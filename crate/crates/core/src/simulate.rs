//! Synthetic-data generation for validation: latent fields drawn through
//! the spectral transform, survival times by inverting the cumulative
//! hazard, and Poisson counts. Deterministic given the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};

use crate::covariance::{CovarianceModel, SpectralBase};
use crate::error::Error;
use crate::fft::Fft2;
use crate::grid::{Grid, Point};
use crate::outcome::{Censoring, CountRecord, SurvivalRecord, WeibullBaseline};
use crate::Result;

/// How simulated survival times are censored: an optional administrative
/// cutoff applied first, then random interval or left censoring at the
/// given rates among the remaining records.
#[derive(Debug, Clone)]
pub struct CensoringScheme {
    pub admin_time: Option<f64>,
    pub interval_rate: f64,
    pub left_rate: f64,
}

impl CensoringScheme {
    /// Every record observed exactly.
    pub fn none() -> Self {
        CensoringScheme { admin_time: None, interval_rate: 0.0, left_rate: 0.0 }
    }

    /// Right censoring at a fixed study-end time only.
    pub fn administrative(time: f64) -> Self {
        CensoringScheme { admin_time: Some(time), interval_rate: 0.0, left_rate: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.admin_time {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::validation(format!(
                    "administrative censoring time must be positive, got {t}"
                )));
            }
        }
        let ok = |r: f64| r.is_finite() && (0.0..=1.0).contains(&r);
        if !ok(self.interval_rate) || !ok(self.left_rate) {
            return Err(Error::validation("censoring rates must lie in [0, 1]"));
        }
        if self.interval_rate + self.left_rate > 1.0 {
            return Err(Error::validation("censoring rates must sum to at most 1"));
        }
        Ok(())
    }
}

/// Draws one latent field: gamma standard normal, then the spectral
/// transform. Returns the field and the gamma that produced it.
pub fn simulate_field(
    grid: &Grid,
    model: &CovarianceModel,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let fft = Fft2::new(grid.n1(), grid.n2());
    let sb = SpectralBase::build(grid, model, &fft)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma: Vec<f64> = (0..grid.m()).map(|_| rng.sample(StandardNormal)).collect();
    let field = sb.gamma_to_field(&gamma);
    Ok((field, gamma))
}

fn simulate_design(
    grid: &Grid,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Point, Vec<f64>, usize)> {
    let bbox = grid.bbox();
    let location = Point::new(
        bbox.min_x + rng.random::<f64>() * bbox.width(),
        bbox.min_y + rng.random::<f64>() * bbox.height(),
    );
    let covariates: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let cell = grid.cell_of(location)?;
    Ok((location, covariates, cell))
}

/// Simulates proportional-hazards survival data over the grid's observation
/// window: locations uniform on the bounding box, covariates standard
/// normal, event times by inverting the cumulative hazard at a unit
/// exponential draw, then the censoring scheme.
pub fn simulate_survival(
    n: usize,
    beta: &[f64],
    baseline: &WeibullBaseline,
    field: &[f64],
    grid: &Grid,
    scheme: &CensoringScheme,
    seed: u64,
) -> Result<Vec<SurvivalRecord>> {
    scheme.validate()?;
    if field.len() != grid.m() {
        return Err(Error::validation(format!(
            "field length {} does not match the grid's {} cells",
            field.len(),
            grid.m()
        )));
    }
    if !(baseline.alpha > 0.0 && baseline.lambda > 0.0) {
        return Err(Error::validation("baseline parameters must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (location, covariates, cell) = simulate_design(grid, beta.len(), &mut rng)?;
        let eta = covariates.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>() + field[cell];
        let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let t = baseline.inv_cum_hazard(-u.ln() / eta.exp());
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::numerical(format!(
                "simulated event time overflowed (eta {eta}, draw {u})"
            )));
        }
        let censoring = match scheme.admin_time {
            Some(c) if t > c => Censoring::Right { t: c },
            _ => {
                if scheme.interval_rate > 0.0 || scheme.left_rate > 0.0 {
                    let v = rng.random::<f64>();
                    if v < scheme.interval_rate {
                        let t1 = t * rng.random_range(0.5..0.95);
                        let t2 = t * (1.0 + rng.random_range(0.05..1.0));
                        Censoring::Interval { t1, t2 }
                    } else if v < scheme.interval_rate + scheme.left_rate {
                        Censoring::Left { t: t * (1.0 + rng.random::<f64>()) }
                    } else {
                        Censoring::Uncensored { t }
                    }
                } else {
                    Censoring::Uncensored { t }
                }
            }
        };
        records.push(SurvivalRecord { id: i.to_string(), censoring, covariates, location });
    }
    Ok(records)
}

/// Simulates Poisson counts with log rate X beta + Y at the record's cell.
/// A vanishing rate yields a zero count.
pub fn simulate_poisson(
    n: usize,
    beta: &[f64],
    field: &[f64],
    grid: &Grid,
    seed: u64,
) -> Result<Vec<CountRecord>> {
    if field.len() != grid.m() {
        return Err(Error::validation(format!(
            "field length {} does not match the grid's {} cells",
            field.len(),
            grid.m()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (location, covariates, cell) = simulate_design(grid, beta.len(), &mut rng)?;
        let eta = covariates.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>() + field[cell];
        let rate = eta.exp();
        let z = if rate > 0.0 {
            if !rate.is_finite() {
                return Err(Error::numerical(format!("infinite Poisson rate at eta {eta}")));
            }
            let pois = Poisson::new(rate)
                .map_err(|e| Error::numerical(format!("Poisson rate {rate}: {e}")))?;
            rng.sample::<f64, _>(&pois) as u64
        } else {
            0
        };
        records.push(CountRecord { id: i.to_string(), z, covariates, location });
    }
    Ok(records)
}
