//! Arc-length / signed-lateral coordinates along a reference polyline.
//!
//! The first and last segments extend to infinity, so points beyond the
//! ends project onto the extended lines and lift back exactly.

use crate::error::{DapError, Result};

/// Polyline with cumulative arc length; consecutive duplicates removed.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub points: Vec<(f64, f64)>,
    /// `cum[i]` is the arc length at `points[i]`.
    pub cum: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrenetPoint {
    pub s: f64,
    /// Left of the direction of travel is positive.
    pub l: f64,
}

impl Reference {
    pub fn new(points: &[(f64, f64)]) -> Result<Self> {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len());
        for &p in points {
            if !(p.0.is_finite() && p.1.is_finite()) {
                return Err(DapError::Config(
                    "reference polyline has a non-finite vertex".into(),
                ));
            }
            if pts.last().is_none_or(|q| *q != p) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return Err(DapError::Config(
                "reference polyline needs two distinct vertices".into(),
            ));
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
        }
        Ok(Reference { points: pts, cum })
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    fn segments(&self) -> usize {
        self.points.len() - 1
    }

    /// Unit direction of segment `i`.
    fn dir(&self, i: usize) -> (f64, f64) {
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        ((b.0 - a.0) / len, (b.1 - a.1) / len)
    }

    /// Closest-point projection; ties go to the earliest segment.
    pub fn project(&self, x: f64, y: f64) -> FrenetPoint {
        let last = self.segments() - 1;
        let mut best = (f64::INFINITY, FrenetPoint { s: 0.0, l: 0.0 });
        for i in 0..=last {
            let a = self.points[i];
            let (dx, dy) = self.dir(i);
            let len = self.cum[i + 1] - self.cum[i];
            let (px, py) = (x - a.0, y - a.1);
            let mut t = px * dx + py * dy;
            if i > 0 {
                t = t.max(0.0);
            }
            if i < last {
                t = t.min(len);
            }
            let (qx, qy) = (px - t * dx, py - t * dy);
            let dist = qx.hypot(qy);
            if dist < best.0 {
                let l = dx * qy - dy * qx;
                best = (
                    dist,
                    FrenetPoint {
                        s: self.cum[i] + t,
                        l,
                    },
                );
            }
        }
        best.1
    }

    /// Inverse of [`Reference::project`] for segment-interior projections.
    pub fn lift(&self, p: FrenetPoint) -> (f64, f64) {
        let i = match self.cum.iter().position(|&c| c > p.s) {
            Some(0) => 0,
            Some(k) => k - 1,
            None => self.segments() - 1,
        }
        .min(self.segments() - 1);
        let a = self.points[i];
        let (dx, dy) = self.dir(i);
        let t = p.s - self.cum[i];
        (a.0 + t * dx - p.l * dy, a.1 + t * dy + p.l * dx)
    }
}

pub fn frenet_project(waypoints: &[(f64, f64)], reference: &Reference) -> Vec<FrenetPoint> {
    waypoints
        .iter()
        .map(|&(x, y)| reference.project(x, y))
        .collect()
}

pub fn frenet_lift(points: &[FrenetPoint], reference: &Reference) -> Vec<(f64, f64)> {
    points.iter().map(|&p| reference.lift(p)).collect()
}
