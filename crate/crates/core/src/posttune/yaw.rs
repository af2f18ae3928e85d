//! Heading recomputation from positions under a per-step rate limit.

use crate::error::{DapError, Result};
use crate::kinematics::wrap_angle_unchecked;

/// Forward-difference headings, then `|ψ_{t+1} − ψ_t| ≤ rate_limit` applied
/// sequentially on wrapped differences. Duplicate consecutive points carry
/// the previous heading; the last point repeats the final heading.
pub fn recompute_yaw(xy: &[(f64, f64)], rate_limit: f64) -> Result<Vec<f64>> {
    if xy.len() < 2 {
        return Err(DapError::Size(format!(
            "yaw recomputation needs at least 2 points, got {}",
            xy.len()
        )));
    }
    if !(rate_limit >= 0.0) {
        return Err(DapError::Config(
            "yaw rate limit must be non-negative".into(),
        ));
    }
    let raw: Vec<Option<f64>> = xy
        .windows(2)
        .map(|w| {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            (dx != 0.0 || dy != 0.0).then(|| dy.atan2(dx))
        })
        .collect();
    // Leading duplicates take the first defined heading.
    let first = raw.iter().flatten().next().copied().unwrap_or(0.0);
    let mut out = Vec::with_capacity(xy.len());
    let mut prev = first;
    for (t, r) in raw.iter().enumerate() {
        let target = r.unwrap_or(prev);
        let psi = if t == 0 {
            target
        } else {
            let d = wrap_angle_unchecked(target - prev).clamp(-rate_limit, rate_limit);
            wrap_angle_unchecked(prev + d)
        };
        out.push(psi);
        prev = psi;
    }
    out.push(prev);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn straight_path_has_zero_yaw() {
        let xy: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 0.0)).collect();
        assert_eq!(recompute_yaw(&xy, 0.3).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn corner_respects_rate_limit() {
        let mut xy: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 0.0)).collect();
        xy.extend((1..8).map(|i| (4.0, i as f64)));
        let yaw = recompute_yaw(&xy, PI / 8.0).unwrap();
        for w in yaw.windows(2) {
            assert!(wrap_angle_unchecked(w[1] - w[0]).abs() <= PI / 8.0 + 1e-15);
        }
        assert!((yaw.last().unwrap() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn circle_matches_tangent() {
        let (r, dtheta) = (20.0, 0.05);
        let xy: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let th = i as f64 * dtheta;
                (r * th.sin(), r * (1.0 - th.cos()))
            })
            .collect();
        let yaw = recompute_yaw(&xy, 0.3).unwrap();
        for (i, y) in yaw.iter().enumerate().take(39) {
            let tangent = i as f64 * dtheta;
            assert!((y - tangent).abs() <= dtheta, "{i}");
        }
    }

    #[test]
    fn duplicates_carry_heading() {
        let xy = [(0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (1.0, 2.0)];
        let yaw = recompute_yaw(&xy, 10.0).unwrap();
        assert_eq!(yaw[0], PI / 4.0);
        assert_eq!(yaw[1], PI / 4.0);
        assert_eq!(yaw[2], PI / 4.0);
        assert_eq!(yaw[3], PI / 2.0);
        assert!(recompute_yaw(&xy[..1], 0.3).is_err());
    }

    #[test]
    fn wraps_across_pi() {
        let xy = [(0.0, 0.0), (-1.0, 0.01), (-2.0, 0.0), (-3.0, -0.01)];
        let yaw = recompute_yaw(&xy, 0.05).unwrap();
        for w in yaw.windows(2) {
            assert!(wrap_angle_unchecked(w[1] - w[0]).abs() <= 0.05 + 1e-15);
        }
    }
}
