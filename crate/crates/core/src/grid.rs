//! The extended toroidal computational grid.
//!
//! Observations live in a planar bounding box; the covariance algebra lives
//! on a `2^m1 x 2^m2` lattice of cells covering an *extended* box at least
//! twice the observation box per axis. The lattice is notionally wrapped on
//! a torus: distances between cells wrap each axis displacement to the
//! shorter way round. Extension by a factor of two or more guarantees that
//! wrapped and planar distances agree for any two cells inside the
//! observation box, so the toroidal model restricted to the observation
//! window is the intended planar model.
//!
//! Layout convention used throughout the crate: the grid has `2^m1` cells
//! along x and `2^m2` along y, and a cell at column `ix`, row `iy` has
//! linear index `iy * 2^m1 + ix` (row-major scanlines of constant y).

use crate::error::Error;
use crate::Result;

/// A planar point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// An axis-aligned planar rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Rect { min_x, min_y, max_x, max_y }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    /// Closed-rectangle containment.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }
}

/// The extended toroidal grid: geometry, record-to-cell mapping, and wrapped
/// distances. Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Grid {
    m1: u32,
    m2: u32,
    bbox: Rect,
    ext_bbox: Rect,
    cell_w: f64,
    cell_h: f64,
    centroids: Vec<Point>,
    obs_mask: Vec<bool>,
}

/// Largest supported per-axis exponent; keeps cell counts within sane memory.
const MAX_EXPONENT: u32 = 15;

/// Builds the extended grid over a set of observation locations.
///
/// The observation bounding box is the tight box of `locations`; the
/// extended box scales it by `ext_factor` per axis with the observation box
/// anchored at the lower-left corner (placement inside the extended box is
/// arbitrary for the model, so it is fixed for reproducibility). A
/// degenerate axis (all points sharing one coordinate) is inflated by one
/// nominal cell width with a warning.
pub fn build_grid(locations: &[Point], m1: u32, m2: u32, ext_factor: f64) -> Result<Grid> {
    if locations.is_empty() {
        return Err(Error::validation("build_grid requires at least one location"));
    }
    if let Some(p) = locations.iter().find(|p| !p.is_finite()) {
        return Err(Error::validation(format!(
            "non-finite observation coordinate ({}, {})",
            p.x, p.y
        )));
    }
    let mut bbox = Rect::new(
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in locations {
        bbox.min_x = bbox.min_x.min(p.x);
        bbox.min_y = bbox.min_y.min(p.y);
        bbox.max_x = bbox.max_x.max(p.x);
        bbox.max_y = bbox.max_y.max(p.y);
    }
    Grid::from_bbox(bbox, m1, m2, ext_factor)
}

impl Grid {
    /// Builds the extended grid from an explicit observation bounding box.
    pub fn from_bbox(bbox: Rect, m1: u32, m2: u32, ext_factor: f64) -> Result<Grid> {
        if !(m1 >= 1 && m2 >= 1 && m1 <= MAX_EXPONENT && m2 <= MAX_EXPONENT) {
            return Err(Error::validation(format!(
                "grid exponents must lie in 1..={MAX_EXPONENT}, got m1={m1}, m2={m2}"
            )));
        }
        if !(ext_factor.is_finite() && ext_factor >= 2.0) {
            return Err(Error::validation(format!(
                "extension factor must be a finite value >= 2, got {ext_factor}"
            )));
        }
        if ![bbox.min_x, bbox.min_y, bbox.max_x, bbox.max_y]
            .iter()
            .all(|v| v.is_finite())
            || bbox.width() < 0.0
            || bbox.height() < 0.0
        {
            return Err(Error::validation(format!("invalid bounding box {bbox:?}")));
        }

        let n1 = 1usize << m1;
        let n2 = 1usize << m2;
        let mut bbox = bbox;
        let (w0, h0) = (bbox.width(), bbox.height());
        if w0 == 0.0 {
            let nominal = if h0 > 0.0 { h0 / n1 as f64 } else { 1.0 };
            log::warn!(
                "degenerate observation bounding box (zero width); inflating x by {nominal}"
            );
            bbox.max_x += nominal;
        }
        if h0 == 0.0 {
            let nominal = if w0 > 0.0 { w0 / n2 as f64 } else { 1.0 };
            log::warn!(
                "degenerate observation bounding box (zero height); inflating y by {nominal}"
            );
            bbox.max_y += nominal;
        }

        let ext_bbox = Rect::new(
            bbox.min_x,
            bbox.min_y,
            bbox.min_x + ext_factor * bbox.width(),
            bbox.min_y + ext_factor * bbox.height(),
        );
        let cell_w = ext_bbox.width() / n1 as f64;
        let cell_h = ext_bbox.height() / n2 as f64;

        let mut centroids = Vec::with_capacity(n1 * n2);
        let mut obs_mask = Vec::with_capacity(n1 * n2);
        for iy in 0..n2 {
            for ix in 0..n1 {
                let cx = ext_bbox.min_x + (ix as f64 + 0.5) * cell_w;
                let cy = ext_bbox.min_y + (iy as f64 + 0.5) * cell_h;
                centroids.push(Point::new(cx, cy));
                // A cell is an observation cell iff it overlaps the
                // observation box with positive area.
                let x_lo = ext_bbox.min_x + ix as f64 * cell_w;
                let y_lo = ext_bbox.min_y + iy as f64 * cell_h;
                obs_mask
                    .push(x_lo < bbox.max_x && x_lo + cell_w > bbox.min_x
                        && y_lo < bbox.max_y && y_lo + cell_h > bbox.min_y);
            }
        }

        Ok(Grid { m1, m2, bbox, ext_bbox, cell_w, cell_h, centroids, obs_mask })
    }

    /// Per-axis exponents.
    pub fn exponents(&self) -> (u32, u32) {
        (self.m1, self.m2)
    }

    /// Number of cells along x.
    pub fn n1(&self) -> usize {
        1 << self.m1
    }

    /// Number of cells along y.
    pub fn n2(&self) -> usize {
        1 << self.m2
    }

    /// Total number of cells `m = 2^(m1+m2)`.
    pub fn m(&self) -> usize {
        self.n1() * self.n2()
    }

    /// The tight observation bounding box.
    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    /// The extended bounding box covered by the torus.
    pub fn ext_bbox(&self) -> Rect {
        self.ext_bbox
    }

    /// Cell width along x.
    pub fn cell_w(&self) -> f64 {
        self.cell_w
    }

    /// Cell height along y.
    pub fn cell_h(&self) -> f64 {
        self.cell_h
    }

    /// Linear index of the cell at column `ix`, row `iy`.
    pub fn index_of(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.n1() && iy < self.n2());
        iy * self.n1() + ix
    }

    /// Column and row of a linear cell index.
    pub fn coords_of(&self, idx: usize) -> (usize, usize) {
        debug_assert!(idx < self.m());
        (idx % self.n1(), idx / self.n1())
    }

    /// Centroid of a cell.
    pub fn centroid(&self, idx: usize) -> Point {
        self.centroids[idx]
    }

    pub fn centroids(&self) -> &[Point] {
        &self.centroids
    }

    /// Per-cell flag, true iff the cell overlaps the observation box.
    pub fn obs_mask(&self) -> &[bool] {
        &self.obs_mask
    }

    /// Indices of cells overlapping the observation box.
    pub fn obs_cells(&self) -> Vec<usize> {
        (0..self.m()).filter(|&i| self.obs_mask[i]).collect()
    }

    /// Maps a point inside the extended box to its cell's linear index.
    ///
    /// Cells are half-open: a point on a shared edge belongs to the cell
    /// with the larger index coordinate. Points on the extended box's own
    /// max edge are kept in the last cell (the torus wraps there).
    pub fn cell_of(&self, p: Point) -> Result<usize> {
        if !p.is_finite() || !self.ext_bbox.contains(p) {
            return Err(Error::validation(format!(
                "point ({}, {}) lies outside the extended bounding box",
                p.x, p.y
            )));
        }
        let ix = (((p.x - self.ext_bbox.min_x) / self.cell_w) as usize).min(self.n1() - 1);
        let iy = (((p.y - self.ext_bbox.min_y) / self.cell_h) as usize).min(self.n2() - 1);
        Ok(self.index_of(ix, iy))
    }

    /// Toroidal distance between two cell centroids: each axis displacement
    /// wraps to the shorter way around the extended box.
    pub fn toroidal_distance(&self, a: usize, b: usize) -> f64 {
        assert!(a < self.m() && b < self.m(), "cell index out of range");
        let (ax, ay) = self.coords_of(a);
        let (bx, by) = self.coords_of(b);
        let lx = ax.abs_diff(bx);
        let ly = ay.abs_diff(by);
        self.lag_distance(lx, ly)
    }

    /// Toroidal distance for an index lag `(lx, ly)`; distance between any
    /// two cells depends only on their index displacement modulo the grid
    /// dimensions.
    pub fn lag_distance(&self, lx: usize, ly: usize) -> f64 {
        debug_assert!(lx < self.n1() && ly < self.n2());
        let lx = lx.min(self.n1() - lx);
        let ly = ly.min(self.n2() - ly);
        let dx = lx as f64 * self.cell_w;
        let dy = ly as f64 * self.cell_h;
        (dx * dx + dy * dy).sqrt()
    }

    /// Planar (unwrapped) centroid distance, for reference and testing.
    pub fn planar_distance(&self, a: usize, b: usize) -> f64 {
        let ca = self.centroid(a);
        let cb = self.centroid(b);
        ((ca.x - cb.x).powi(2) + (ca.y - cb.y).powi(2)).sqrt()
    }
}
