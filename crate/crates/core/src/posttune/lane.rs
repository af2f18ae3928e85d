//! Lane-center likelihood map and gradient-ascent lane anchors.

use crate::error::{DapError, Result};

/// `P ∈ [0,1]^{H×W}`; cell `(r, c)` is centered at
/// `(origin_x + c·res, origin_y + r·res)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneLikelihoodMap {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub resolution: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    /// Row-major values.
    pub values: Vec<f64>,
}

impl LaneLikelihoodMap {
    pub fn new(
        height: usize,
        width: usize,
        resolution: f64,
        origin: (f64, f64),
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = LaneLikelihoodMap {
            height,
            width,
            resolution,
            origin_x: origin.0,
            origin_y: origin.1,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// Samples `f(x, y)` at every cell center.
    pub fn from_fn(
        height: usize,
        width: usize,
        resolution: f64,
        origin: (f64, f64),
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(
                    origin.0 + c as f64 * resolution,
                    origin.1 + r as f64 * resolution,
                ));
            }
        }
        Self::new(height, width, resolution, origin, values)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(DapError::Config("lane map needs at least 2×2 cells".into()));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(DapError::Config(
                "lane map resolution must be positive".into(),
            ));
        }
        if self.values.len() != self.height * self.width {
            return Err(DapError::Size(format!(
                "lane map has {} values for {}×{} cells",
                self.values.len(),
                self.height,
                self.width
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DapError::Validation(format!(
                "lane likelihood {v} outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// World point → fractional `(row, col)`.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.origin_y) / self.resolution,
            (x - self.origin_x) / self.resolution,
        )
    }

    pub fn to_world(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.resolution,
            self.origin_y + row * self.resolution,
        )
    }

    pub fn contains_cell(&self, row: f64, col: f64) -> bool {
        row >= 0.0
            && col >= 0.0
            && row <= (self.height - 1) as f64
            && col <= (self.width - 1) as f64
    }

    fn bilinear(&self, row: f64, col: f64, f: impl Fn(usize, usize) -> f64) -> f64 {
        let r0 = (row.floor() as usize).min(self.height - 2);
        let c0 = (col.floor() as usize).min(self.width - 2);
        let (fr, fc) = (row - r0 as f64, col - c0 as f64);
        let top = f(r0, c0) * (1.0 - fc) + f(r0, c0 + 1) * fc;
        let bot = f(r0 + 1, c0) * (1.0 - fc) + f(r0 + 1, c0 + 1) * fc;
        top * (1.0 - fr) + bot * fr
    }

    /// Bilinear interpolation at a fractional cell inside the map.
    pub fn sample(&self, row: f64, col: f64) -> f64 {
        self.bilinear(row, col, |r, c| self.get(r, c))
    }

    /// Central-difference gradient `(∂/∂row, ∂/∂col)` at a cell, one-sided at borders.
    pub fn cell_gradient(&self, r: usize, c: usize) -> (f64, f64) {
        let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / span as f64;
        let (ru, rd) = (r.saturating_sub(1), (r + 1).min(self.height - 1));
        let (cl, cr) = (c.saturating_sub(1), (c + 1).min(self.width - 1));
        (
            diff(self.get(ru, c), self.get(rd, c), rd - ru),
            diff(self.get(r, cl), self.get(r, cr), cr - cl),
        )
    }

    /// Bilinearly interpolated cell gradient, per cell.
    pub fn gradient(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.bilinear(row, col, |r, c| self.cell_gradient(r, c).0),
            self.bilinear(row, col, |r, c| self.cell_gradient(r, c).1),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub iterations: usize,
    /// The waypoint was outside the map and returned unchanged.
    pub outside: bool,
}

/// Gradient ascent `x ← x + step·∇P(x)` in cell units, clamped to the map.
pub fn lane_anchor(map: &LaneLikelihoodMap, x: f64, y: f64, step: f64, max_iters: usize) -> Anchor {
    let (mut row, mut col) = map.to_cell(x, y);
    if !map.contains_cell(row, col) {
        return Anchor {
            x,
            y,
            iterations: 0,
            outside: true,
        };
    }
    let (rmax, cmax) = ((map.height - 1) as f64, (map.width - 1) as f64);
    let mut iterations = 0;
    while iterations < max_iters {
        let (gr, gc) = map.gradient(row, col);
        if gr.hypot(gc) < 1e-6 {
            break;
        }
        row = (row + step * gr).clamp(0.0, rmax);
        col = (col + step * gc).clamp(0.0, cmax);
        iterations += 1;
    }
    let (ax, ay) = map.to_world(row, col);
    Anchor {
        x: ax,
        y: ay,
        iterations,
        outside: false,
    }
}
