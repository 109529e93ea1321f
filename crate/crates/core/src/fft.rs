//! Two-dimensional DFT on the grid's scanline layout.
//!
//! Buffers hold `n2` rows of length `n1` (element `(ix, iy)` at index
//! `iy * n1 + ix`), matching [`crate::grid::Grid`]'s linear cell indexing.
//! The forward transform is unnormalized; the inverse carries the full
//! `1/m` factor, so `inverse(forward(x)) = x`.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Planned 2-D FFT for a fixed grid shape. Cloning shares the plans.
#[derive(Clone)]
pub struct Fft2 {
    n1: usize,
    n2: usize,
    fwd_row: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n1", &self.n1).field("n2", &self.n2).finish()
    }
}

impl Fft2 {
    pub fn new(n1: usize, n2: usize) -> Self {
        assert!(n1 >= 1 && n2 >= 1);
        let mut planner = FftPlanner::new();
        Fft2 {
            n1,
            n2,
            fwd_row: planner.plan_fft_forward(n1),
            inv_row: planner.plan_fft_inverse(n1),
            fwd_col: planner.plan_fft_forward(n2),
            inv_col: planner.plan_fft_inverse(n2),
        }
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place unnormalized forward 2-D DFT.
    pub fn forward(&self, data: &mut [Complex<f64>]) {
        self.pass(data, &self.fwd_row, &self.fwd_col);
    }

    /// In-place inverse 2-D DFT, scaled by `1/m`.
    pub fn inverse(&self, data: &mut [Complex<f64>]) {
        self.pass(data, &self.inv_row, &self.inv_col);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn pass(&self, data: &mut [Complex<f64>], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.len(), "buffer does not match grid shape");
        // Rows are contiguous: one batched call transforms all of them.
        row.process(data);
        if self.n2 > 1 {
            // Columns via transpose, batched transform, transpose back.
            let mut t = vec![Complex::new(0.0, 0.0); data.len()];
            transpose(data, &mut t, self.n1, self.n2);
            col.process(&mut t);
            transpose(&t, data, self.n2, self.n1);
        }
    }
}

/// Transposes `rows` rows of length `row_len` from `src` into `dst`.
fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], row_len: usize, rows: usize) {
    for r in 0..rows {
        for c in 0..row_len {
            dst[c * rows + r] = src[r * row_len + c];
        }
    }
}
