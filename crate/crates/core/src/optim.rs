//! Numerical maximization utilities for initialization: a BFGS ascent with
//! backtracking line search, and a least-squares quadratic surface fit.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Result of a successful maximization.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
}

/// Maximizes `f` by BFGS with Armijo backtracking, starting from `x0`.
///
/// `f` returns the objective and its gradient; an error from `f` during a
/// line search is treated as an infeasible point (the step shrinks), while
/// an error at the starting point aborts. Converges when the gradient
/// max-norm drops below `tol * (1 + |f|)`, so the tolerance tracks the
/// objective's scale, or when several consecutive steps improve the
/// objective by less than its floating-point resolution: at that point the
/// iterate is as stationary as the arithmetic allows.
pub fn maximize<F>(f: F, x0: &[f64], tol: f64, max_iter: usize) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let d = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, mut gx) = {
        let (v, g) = f(x.as_slice())?;
        (v, DVector::from_vec(g))
    };
    if d == 0 {
        return Ok(OptimResult { x: Vec::new(), value: fx, gradient: Vec::new(), iterations: 0 });
    }
    let mut h_inv: DMatrix<f64> = DMatrix::identity(d, d);
    let mut trace: Vec<(usize, f64, f64)> = Vec::new();
    let mut stalled = 0usize;

    for iter in 0..max_iter {
        let g_norm = gx.amax();
        trace.push((iter, fx, g_norm));
        if g_norm < tol * (1.0 + fx.abs()) {
            return Ok(OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                gradient: gx.as_slice().to_vec(),
                iterations: iter,
            });
        }

        let mut dir = &h_inv * &gx;
        let mut slope = dir.dot(&gx);
        if !(slope > 0.0) {
            // Curvature information went bad; restart from steepest ascent.
            h_inv = DMatrix::identity(d, d);
            dir = gx.clone();
            slope = dir.dot(&gx);
        }

        // Armijo backtracking.
        let mut alpha = 1.0f64;
        let mut accepted = None;
        while alpha > 1e-14 {
            let x_new = &x + alpha * &dir;
            match f(x_new.as_slice()) {
                Ok((f_new, g_new)) if f_new.is_finite() && f_new >= fx + 1e-4 * alpha * slope => {
                    accepted = Some((x_new, f_new, DVector::from_vec(g_new)));
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No ascent step exists at this scale. With a usable gradient
            // norm this counts as converged to the attainable precision.
            return Ok(OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                gradient: gx.as_slice().to_vec(),
                iterations: iter,
            });
        };

        if f_new - fx <= 1e-12 * (1.0 + fx.abs()) {
            stalled += 1;
            if stalled >= 5 {
                return Ok(OptimResult {
                    x: x_new.as_slice().to_vec(),
                    value: f_new,
                    gradient: g_new.as_slice().to_vec(),
                    iterations: iter + 1,
                });
            }
        } else {
            stalled = 0;
        }

        let s = &x_new - &x;
        let y = &g_new - &gx;
        // BFGS update on the maximization form: H approximates the inverse
        // of the negative Hessian, so the curvature condition is s.y < 0.
        let sy = -s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h_inv * -&y;
            let syh = -y.dot(&hy);
            let term: DMatrix<f64> = (rho * rho * syh + rho) * (&s * s.transpose());
            let cross = rho * (&hy * s.transpose());
            h_inv = h_inv + term - &cross - cross.transpose();
        }

        x = x_new;
        fx = f_new;
        gx = g_new;
    }

    let tail: Vec<String> = trace
        .iter()
        .rev()
        .take(5)
        .rev()
        .map(|(i, f, g)| format!("iter {i}: f = {f:.6e}, |grad| = {g:.3e}"))
        .collect();
    Err(Error::numerical(format!(
        "maximization did not converge in {max_iter} iterations; trace: {}",
        tail.join("; ")
    )))
}

/// A fitted quadratic surface
/// `f(x, y) = c0 + c1 x + c2 y + c3 x^2 + c4 y^2 + c5 x y`.
#[derive(Debug, Clone)]
pub struct Quadratic2 {
    pub coeffs: [f64; 6],
}

impl Quadratic2 {
    /// Least-squares fit through `points = (x, y, f)`; needs at least six
    /// well-spread points.
    pub fn fit(points: &[(f64, f64, f64)]) -> Result<Self> {
        if points.len() < 6 {
            return Err(Error::validation(format!(
                "quadratic surface fit needs >= 6 points, got {}",
                points.len()
            )));
        }
        let rows = points.len();
        let mut a = DMatrix::zeros(rows, 6);
        let mut b = DVector::zeros(rows);
        for (i, &(x, y, fv)) in points.iter().enumerate() {
            a[(i, 0)] = 1.0;
            a[(i, 1)] = x;
            a[(i, 2)] = y;
            a[(i, 3)] = x * x;
            a[(i, 4)] = y * y;
            a[(i, 5)] = x * y;
            b[i] = fv;
        }
        let svd = a.svd(true, true);
        let sol = svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::numerical(format!("quadratic fit failed: {e}")))?;
        Ok(Quadratic2 { coeffs: [sol[0], sol[1], sol[2], sol[3], sol[4], sol[5]] })
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let c = &self.coeffs;
        c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * y * y + c[5] * x * y
    }

    /// The Hessian of the surface.
    pub fn hessian(&self) -> [[f64; 2]; 2] {
        let c = &self.coeffs;
        [[2.0 * c[3], c[5]], [c[5], 2.0 * c[4]]]
    }

    /// The unique maximizer and the negated inverse Hessian (a covariance
    /// matrix), when the surface is strictly concave; `None` otherwise.
    pub fn argmax(&self) -> Option<([f64; 2], [[f64; 2]; 2])> {
        let h = self.hessian();
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        // Negative definite iff h00 < 0 and det > 0.
        if !(h[0][0] < 0.0 && det > 0.0) {
            return None;
        }
        let c = &self.coeffs;
        // Solve H [x y]^T = -[c1 c2]^T.
        let x = (-c[1] * h[1][1] + c[2] * h[0][1]) / det;
        let y = (-c[2] * h[0][0] + c[1] * h[1][0]) / det;
        // -H^{-1} via the adjugate.
        let cov = [
            [-h[1][1] / det, h[0][1] / det],
            [h[1][0] / det, -h[0][0] / det],
        ];
        Some(([x, y], cov))
    }
}
