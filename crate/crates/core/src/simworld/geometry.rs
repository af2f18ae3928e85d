//! Oriented rectangles, separating-axis overlap and polygon distances.

use serde::{Deserialize, Serialize};

/// Rectangle centered at `(cx, cy)`, long axis along `yaw`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub yaw: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Rect {
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (l, w) = (self.half_len, self.half_wid);
        [(l, w), (-l, w), (-l, -w), (l, -w)]
            .map(|(u, v)| (self.cx + u * c - v * s, self.cy + u * s + v * c))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.half_len && v.abs() <= self.half_wid
    }

    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.yaw.sin_cos();
        [(c, s), (-s, c)]
    }
}

fn project(corners: &[(f64, f64); 4], axis: (f64, f64)) -> (f64, f64) {
    corners
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let d = p.0 * axis.0 + p.1 * axis.1;
            (lo.min(d), hi.max(d))
        })
}

/// Closed-set overlap by the separating-axis test.
pub fn overlaps(a: &Rect, b: &Rect) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (a0, a1) = project(&ca, axis);
        let (b0, b1) = project(&cb, axis);
        if a1 < b0 || b1 < a0 {
            return false;
        }
    }
    true
}

/// Distance from `p` to the segment `a–b`.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Euclidean distance between two rectangles; 0 when they overlap.
pub fn rect_distance(a: &Rect, b: &Rect) -> f64 {
    if overlaps(a, b) {
        return 0.0;
    }
    let (ca, cb) = (a.corners(), b.corners());
    let mut best = f64::INFINITY;
    for (pts, other) in [(&ca, &cb), (&cb, &ca)] {
        for &p in pts.iter() {
            for i in 0..4 {
                best = best.min(point_segment_distance(p, other[i], other[(i + 1) % 4]));
            }
        }
    }
    best
}
