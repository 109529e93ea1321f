//! Dense reference implementations: full toroidal covariance matrices,
//! symmetric square roots, and a dense-path log posterior. These are oracles
//! for equivalence tests, plus the standard-method arm of the cost
//! benchmark. Cubic in the problem size by design; guarded against misuse.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covariance::CovarianceModel;
use crate::error::Error;
use crate::grid::{Grid, Rect};
use crate::mcmc::{adapt, initialize, mh_step, ChainState};
use crate::outcome::{
    poisson_loglik, record_loglik, record_loglik_with_deta, Observations, SurvivalRecord,
    WeibullBaseline,
};
use crate::posterior::{GaussianPrior, ParameterState, PosteriorContext, Priors};
use crate::simulate::{simulate_field, simulate_survival, CensoringScheme};
use crate::Result;

/// Largest cell count the dense paths accept; beyond this the cubic cost is
/// an oracle misuse, not a supported computation.
pub const DENSE_CELL_LIMIT: usize = 4096;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The full m-by-m covariance matrix over grid cells at toroidal distances.
/// Symmetric and block circulant by construction.
pub fn dense_cov(grid: &Grid, model: &CovarianceModel) -> Result<DMatrix<f64>> {
    let m = grid.m();
    if m > DENSE_CELL_LIMIT {
        return Err(Error::validation(format!(
            "dense covariance supports at most {DENSE_CELL_LIMIT} cells, got {m}"
        )));
    }
    let mut cov = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = model.value(grid.toroidal_distance(a, b))?;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Symmetric positive-semidefinite square root via eigendecomposition.
/// Rounding-level negative eigenvalues are clamped to zero; materially
/// negative ones mean the matrix is not a covariance.
pub fn dense_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let min = eig.eigenvalues.min();
    if min < -1e-8 * scale {
        return Err(Error::NonPositiveDefinite { min_eig: min });
    }
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// The log posterior computed entirely through dense linear algebra: the
/// field is built as -sigma^2/2 plus the dense symmetric root applied to
/// gamma, and every likelihood and prior term matches the spectral path's
/// definition term for term.
pub fn dense_posterior(ctx: &PosteriorContext, state: &ParameterState) -> Result<f64> {
    let model = ctx.model_at(&state.eta_t)?;
    let cov = dense_cov(ctx.grid(), &model)?;
    let root = dense_sqrt(&cov)?;
    let gamma = DVector::from_column_slice(&state.gamma);
    let centered = &root * gamma;
    let half_s2 = 0.5 * state.sigma2();
    let field: Vec<f64> = centered.iter().map(|v| v - half_s2).collect();

    let cells = ctx.cells();
    let mut loglik = 0.0;
    match ctx.observations() {
        Observations::Survival(records) => {
            let b = WeibullBaseline::from_log(&state.omega_t);
            for (i, r) in records.iter().enumerate() {
                let eta = dot(&r.covariates, &state.beta)
                    + field[cells[i]]
                    + state.u.as_ref().map_or(0.0, |u| u[i]);
                loglik += record_loglik(r, &b, eta)?;
            }
        }
        Observations::Count(records) => {
            for (i, r) in records.iter().enumerate() {
                let eta = dot(&r.covariates, &state.beta)
                    + field[cells[i]]
                    + state.u.as_ref().map_or(0.0, |u| u[i]);
                loglik += poisson_loglik(r.z, eta)?;
            }
        }
    }

    let pri = ctx.priors();
    let mut log_prior = 0.0;
    for (j, pr) in pri.beta.iter().enumerate() {
        log_prior += pr.logpdf(state.beta[j]);
    }
    for (k, pr) in pri.omega_t.iter().enumerate() {
        log_prior += pr.logpdf(state.omega_t[k]);
    }
    log_prior += pri.log_sigma.logpdf(state.eta_t[0]);
    log_prior += pri.log_phi.logpdf(state.eta_t[1]);

    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let gamma_sq: f64 = state.gamma.iter().map(|g| g * g).sum();
    log_prior += -(state.gamma.len() as f64) * half_ln_2pi - 0.5 * gamma_sq;
    if let (Some(u), Some(su)) = (&state.u, pri.sigma_u) {
        let u_sq: f64 = u.iter().map(|v| v * v).sum();
        log_prior += -(u.len() as f64) * (half_ln_2pi + su.ln()) - 0.5 * u_sq / (su * su);
    }
    Ok(loglik + log_prior)
}

/// Sizes, grids, and repetition counts for the cost comparison.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    /// Observation counts for the spectral arm (fixed grid).
    pub fourier_sizes: Vec<usize>,
    /// Observation counts for the dense standard-method arm.
    pub dense_sizes: Vec<usize>,
    /// Output-grid exponents of the spectral arm's grid.
    pub exponents: (u32, u32),
    /// Iterations per timing chunk; a window runs whole chunks until
    /// `min_window_secs` has elapsed.
    pub iterations: usize,
    /// Repetitions whose median is reported.
    pub repetitions: usize,
    /// Shortest timed window. A window much shorter than a scheduler
    /// quantum can absorb a whole hiccup; stretching every window to the
    /// same floor keeps the sizes comparable.
    pub min_window_secs: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            fourier_sizes: vec![250, 500, 1000, 2000],
            dense_sizes: vec![50, 100, 200, 400],
            exponents: (5, 5),
            iterations: 1000,
            repetitions: 5,
            min_window_secs: 0.25,
            seed: 7,
        }
    }
}

/// One timed series point.
#[derive(Debug, Clone)]
pub struct BenchmarkPoint {
    pub method: String,
    pub n: usize,
    pub grid: String,
    pub seconds_per_1000_iter: f64,
}

/// Renders the timing table as CSV.
pub fn benchmark_csv(points: &[BenchmarkPoint]) -> String {
    let mut out = String::from("method,n,grid,seconds_per_1000_iter\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            p.method, p.n, p.grid, p.seconds_per_1000_iter
        ));
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn benchmark_data(n: usize, grid: &Grid, seed: u64) -> Result<Vec<SurvivalRecord>> {
    let model = CovarianceModel::exponential(0.16, 0.1)?;
    let (field, _) = simulate_field(grid, &model, seed)?;
    let baseline = WeibullBaseline::new(0.8, 0.01)?;
    simulate_survival(
        n,
        &[0.5, -0.3],
        &baseline,
        &field,
        grid,
        &CensoringScheme::administrative(500.0),
        seed.wrapping_add(1),
    )
}

fn benchmark_priors() -> Priors {
    Priors::vague(2, 2, GaussianPrior { mean: (0.1f64).ln(), sd: 0.3 })
}

/// Times the spectral-path sampler at one observation count. The grid
/// exponents describe the output window; doubling the box doubles each
/// axis, so the extended grid adds one to each exponent.
fn time_fourier(n: usize, cfg: &BenchmarkConfig) -> Result<f64> {
    let grid = Grid::from_bbox(
        Rect::new(0.0, 0.0, 1.0, 1.0),
        cfg.exponents.0 + 1,
        cfg.exponents.1 + 1,
        2.0,
    )?;
    let records = benchmark_data(n, &grid, cfg.seed)?;
    let family = CovarianceModel::exponential(1.0, 0.1)?;
    let ctx = PosteriorContext::new(grid, Observations::Survival(records), family, benchmark_priors())?;
    let (params, mut scalings) = initialize(&ctx)?;
    scalings.set_h(0.3);
    let mut chain = ChainState::new(&ctx, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    for _ in 0..20 {
        mh_step(&ctx, &mut chain, &scalings, &mut rng);
    }
    let mut times = Vec::with_capacity(cfg.repetitions);
    let mut i = 0;
    for _ in 0..cfg.repetitions {
        let start = Instant::now();
        let mut done = 0usize;
        loop {
            for _ in 0..cfg.iterations {
                i += 1;
                let r = mh_step(&ctx, &mut chain, &scalings, &mut rng);
                adapt(&mut scalings, r.mean_indicator, i, 0.574, 0.6);
            }
            done += cfg.iterations;
            let secs = start.elapsed().as_secs_f64();
            if secs >= cfg.min_window_secs {
                times.push(secs / done as f64);
                break;
            }
        }
    }
    Ok(median(times) * 1000.0)
}

/// The standard-method arm: the same survival model with per-individual
/// latent field values and ordinary dense matrix operations. Every
/// iteration evaluates the multivariate normal prior of the latent values
/// the conventional way: covariance fill, Cholesky factorization, the
/// precision matrix assembled by inverting the factor, and the log
/// determinant, with the precision then driving the density, its
/// gradient, and the Langevin drift. Run for cost, never for inference.
struct DenseArm {
    records: Vec<SurvivalRecord>,
    priors: Priors,
    /// Pairwise planar distances between observation locations; fixed
    /// across iterations, so computed once.
    dist: DMatrix<f64>,
    /// Scratch for the covariance, its in-place Cholesky factor, and then
    /// the inverted factor; reused so the timed region never touches the
    /// allocator.
    cov: DMatrix<f64>,
    /// Scratch for the precision matrix (lower triangle).
    prec: DMatrix<f64>,
    /// Scratch for one triangular-solve column.
    solve: Vec<f64>,
    /// Scratch for the centered field and the precision matvec.
    q: Vec<f64>,
    u: Vec<f64>,
    beta: [f64; 2],
    omega_t: [f64; 2],
    eta_t: [f64; 2],
    s: DVector<f64>,
}

/// Per-iteration state the stepping loop reuses: the current and candidate
/// evaluations plus the proposal noise, all preallocated.
struct DenseWork {
    cur: DenseEval,
    cand: DenseEval,
    z: DVector<f64>,
    s_cand: DVector<f64>,
}

impl DenseWork {
    fn new(n: usize) -> Self {
        let eval = || DenseEval { log_posterior: 0.0, grad_s: DVector::zeros(n) };
        DenseWork { cur: eval(), cand: eval(), z: DVector::zeros(n), s_cand: DVector::zeros(n) }
    }
}

/// Overwrites the lower triangle of `a` with its Cholesky factor
/// (right-looking, column-contiguous). Returns false on a non-positive
/// pivot. The strict upper triangle is ignored and left untouched.
fn cholesky_lower_in_place(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    let s = a.as_mut_slice();
    for j in 0..n {
        let cj = j * n;
        let d = s[cj + j];
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        s[cj + j] = d;
        let inv = 1.0 / d;
        for v in &mut s[cj + j + 1..cj + n] {
            *v *= inv;
        }
        // Trailing update: columns k > j lose the rank-one term built from
        // column j. `rest` holds exactly the n - j - 1 following columns.
        let (colj, rest) = s[cj + j..].split_at_mut(n - j);
        for (t, chunk) in rest.chunks_exact_mut(n).enumerate() {
            let ljk = colj[t + 1];
            for (x, l) in chunk[j + 1 + t..].iter_mut().zip(&colj[t + 1..]) {
                *x -= ljk * l;
            }
        }
    }
    true
}

/// Overwrites the lower-triangular factor in `a` with its inverse, one
/// forward substitution per column. The solve for column j reads only
/// columns j and beyond, so finished columns can be written back in
/// order. `w` is an n-length scratch.
fn invert_lower_in_place(a: &mut DMatrix<f64>, w: &mut [f64]) {
    let n = a.nrows();
    let s = a.as_mut_slice();
    for j in 0..n {
        w[j] = 1.0;
        for v in &mut w[j + 1..n] {
            *v = 0.0;
        }
        for k in j..n {
            let ck = k * n;
            let wk = w[k] / s[ck + k];
            w[k] = wk;
            for (wi, l) in w[k + 1..n].iter_mut().zip(&s[ck + k + 1..ck + n]) {
                *wi -= l * wk;
            }
        }
        let cj = j * n;
        s[cj + j..cj + n].copy_from_slice(&w[j..n]);
    }
}

/// Fills the lower triangle of `prec` with W^T W, the precision matrix
/// when W holds the inverted Cholesky factor. Both column tails in each
/// dot product are contiguous.
fn precision_from_inverted_factor(a: &DMatrix<f64>, prec: &mut DMatrix<f64>) {
    let n = a.nrows();
    let w = a.as_slice();
    let p = prec.as_mut_slice();
    for j in 0..n {
        let cj = j * n;
        for i in j..n {
            let ci = i * n;
            let acc: f64 = w[ci + i..ci + n].iter().zip(&w[cj + i..]).map(|(x, y)| x * y).sum();
            p[cj + i] = acc;
        }
    }
}

/// y = P q for the symmetric matrix whose lower triangle fills `p`.
fn symv_lower(p: &DMatrix<f64>, q: &[f64], y: &mut [f64]) {
    let n = p.nrows();
    let s = p.as_slice();
    y.fill(0.0);
    for j in 0..n {
        let cj = j * n;
        let qj = q[j];
        let mut acc = s[cj + j] * qj;
        for ((yi, pij), qi) in y[j + 1..].iter_mut().zip(&s[cj + j + 1..cj + n]).zip(&q[j + 1..])
        {
            *yi += pij * qj;
            acc += pij * qi;
        }
        y[j] += acc;
    }
}

struct DenseEval {
    log_posterior: f64,
    grad_s: DVector<f64>,
}

impl DenseArm {
    fn new(records: Vec<SurvivalRecord>, priors: Priors) -> Self {
        let n = records.len();
        let dist = DMatrix::from_fn(n, n, |a, b| {
            let pa = records[a].location;
            let pb = records[b].location;
            ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt()
        });
        let sigma2 = 0.4f64 * 0.4;
        DenseArm {
            records,
            priors,
            dist,
            cov: DMatrix::zeros(n, n),
            prec: DMatrix::zeros(n, n),
            solve: vec![0.0; n],
            q: vec![0.0; n],
            u: vec![0.0; n],
            beta: [0.0; 2],
            omega_t: [0.0; 2],
            eta_t: [(0.4f64).ln(), (0.1f64).ln()],
            // The latent values start at their prior mean.
            s: DVector::from_element(n, -0.5 * sigma2),
        }
    }

    fn evaluate_into(
        &mut self,
        beta: &[f64; 2],
        omega_t: &[f64; 2],
        eta_t: &[f64; 2],
        s_vec: &DVector<f64>,
        out: &mut DenseEval,
    ) -> Result<()> {
        let n = self.records.len();
        let sigma2 = (2.0 * eta_t[0]).exp();
        let inv_phi = (-eta_t[1]).exp();

        // The factorization reads only the lower triangle, so only that
        // half is filled (column-contiguous, matching the storage).
        {
            let cov = self.cov.as_mut_slice();
            let dist = self.dist.as_slice();
            for b in 0..n {
                let c = b * n;
                cov[c + b] = sigma2;
                for (cv, d) in cov[c + b + 1..c + n].iter_mut().zip(&dist[c + b + 1..c + n]) {
                    *cv = sigma2 * (-d * inv_phi).exp();
                }
            }
        }
        if !cholesky_lower_in_place(&mut self.cov) {
            return Err(Error::NonPositiveDefinite { min_eig: f64::NAN });
        }
        // log|Sigma| comes off the factor diagonal before inversion
        // destroys it.
        let mut logdet = 0.0;
        {
            let l = self.cov.as_slice();
            for j in 0..n {
                logdet += l[j * n + j].ln();
            }
            logdet *= 2.0;
        }
        invert_lower_in_place(&mut self.cov, &mut self.solve);
        precision_from_inverted_factor(&self.cov, &mut self.prec);

        // Gaussian prior of the latent values: u = Sigma^{-1}(s - mean)
        // feeds the quadratic form, the gradient, and the drift.
        let mean = -0.5 * sigma2;
        for (qi, si) in self.q.iter_mut().zip(s_vec.iter()) {
            *qi = si - mean;
        }
        symv_lower(&self.prec, &self.q, &mut self.u);
        let quad: f64 = self.q.iter().zip(&self.u).map(|(a, b)| a * b).sum();

        let b = WeibullBaseline::from_log(omega_t);
        let mut loglik = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            let eta = dot(&r.covariates, beta) + s_vec[i];
            let (ll, de) = record_loglik_with_deta(r, &b, eta)?;
            loglik += ll;
            out.grad_s[i] = de - self.u[i];
        }

        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut lp =
            loglik - 0.5 * quad - 0.5 * logdet - (n as f64) * half_ln_2pi;
        for (j, pr) in self.priors.beta.iter().enumerate() {
            lp += pr.logpdf(beta[j]);
        }
        for (k, pr) in self.priors.omega_t.iter().enumerate() {
            lp += pr.logpdf(omega_t[k]);
        }
        lp += self.priors.log_sigma.logpdf(eta_t[0]);
        lp += self.priors.log_phi.logpdf(eta_t[1]);
        if !lp.is_finite() {
            return Err(Error::numerical("non-finite dense posterior"));
        }
        out.log_posterior = lp;
        Ok(())
    }

    /// One joint Metropolis-Hastings iteration: random walk on the scalar
    /// blocks, a Langevin move on the whitened coordinates.
    fn step(&mut self, w: &mut DenseWork, tau: f64, rng: &mut ChaCha8Rng) -> bool {
        let step_sd = 0.02;
        let jitter = |v: &[f64; 2], rng: &mut ChaCha8Rng| {
            [
                v[0] + step_sd * rng.sample::<f64, _>(StandardNormal),
                v[1] + step_sd * rng.sample::<f64, _>(StandardNormal),
            ]
        };
        let beta = jitter(&self.beta, rng);
        let omega_t = jitter(&self.omega_t, rng);
        let eta_t = jitter(&self.eta_t, rng);
        let half_tau = tau / 2.0;
        let sqrt_tau = tau.sqrt();
        for i in 0..self.gamma.len() {
            w.z[i] = rng.sample(StandardNormal);
            w.gamma_cand[i] = self.gamma[i] + half_tau * w.cur.grad_gamma[i] + sqrt_tau * w.z[i];
        }
        let log_u = rng.random::<f64>().max(f64::MIN_POSITIVE).ln();

        if self.evaluate_into(&beta, &omega_t, &eta_t, &w.gamma_cand, &mut w.cand).is_err() {
            return false;
        }
        // Langevin proposal ratio for the whitened block; scalar blocks
        // are symmetric.
        let mut back2 = 0.0;
        for i in 0..self.gamma.len() {
            let b = self.gamma[i] - w.gamma_cand[i] - half_tau * w.cand.grad_gamma[i];
            back2 += b * b;
        }
        let fwd2 = tau * w.z.norm_squared();
        let ratio = (fwd2 - back2) / (2.0 * tau);
        let log_alpha = w.cand.log_posterior - w.cur.log_posterior + ratio;
        if log_u < log_alpha {
            self.beta = beta;
            self.omega_t = omega_t;
            self.eta_t = eta_t;
            std::mem::swap(&mut self.gamma, &mut w.gamma_cand);
            std::mem::swap(&mut w.cur, &mut w.cand);
            true
        } else {
            false
        }
    }
}

/// Times the dense standard-method sampler at one observation count.
fn time_dense(n: usize, cfg: &BenchmarkConfig) -> Result<f64> {
    let grid = Grid::from_bbox(Rect::new(0.0, 0.0, 1.0, 1.0), 3, 3, 2.0)?;
    let records = benchmark_data(n, &grid, cfg.seed.wrapping_add(10))?;
    let mut arm = DenseArm::new(records, benchmark_priors());
    let mut w = DenseWork::new(n);
    let (beta, omega_t, eta_t, gamma) = (arm.beta, arm.omega_t, arm.eta_t, arm.gamma.clone());
    arm.evaluate_into(&beta, &omega_t, &eta_t, &gamma, &mut w.cur)?;
    let tau = 0.05 / (n as f64).cbrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(11));
    for _ in 0..20 {
        arm.step(&mut w, tau, &mut rng);
    }
    let mut times = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        let start = Instant::now();
        let mut done = 0usize;
        loop {
            for _ in 0..cfg.iterations {
                arm.step(&mut w, tau, &mut rng);
            }
            done += cfg.iterations;
            let secs = start.elapsed().as_secs_f64();
            if secs >= cfg.min_window_secs {
                times.push(secs / done as f64);
                break;
            }
        }
    }
    Ok(median(times) * 1000.0)
}

/// Runs both arms and returns the timing table. Both arms are strictly
/// single proposal and single threaded so the comparison is about
/// per-iteration algebraic cost, never about parallel hardware. The two
/// arms fit different models; only costs are comparable.
pub fn benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkPoint>> {
    let mut points = Vec::new();
    let ext = (
        1usize << (cfg.exponents.0 + 1),
        1usize << (cfg.exponents.1 + 1),
    );
    let grid_label = format!("{}x{}", ext.0, ext.1);
    for &n in &cfg.fourier_sizes {
        points.push(BenchmarkPoint {
            method: "fourier".into(),
            n,
            grid: grid_label.clone(),
            seconds_per_1000_iter: time_fourier(n, cfg)?,
        });
    }
    for &n in &cfg.dense_sizes {
        points.push(BenchmarkPoint {
            method: "dense".into(),
            n,
            grid: "-".into(),
            seconds_per_1000_iter: time_dense(n, cfg)?,
        });
    }
    Ok(points)
}
