//! Pose trajectories, curvature–acceleration sequences and finite-difference rates.
//!
//! A pose sequence sampled every `dt` seconds maps to per-step speed
//! `v_t = |p_{t+1} - p_t| / dt`, yaw rate `ω_t = wrap(ψ_{t+1} - ψ_t) / dt`,
//! curvature `κ_t = ω_t / max(v_t, eps)` and acceleration
//! `a_t = (v_{t+1} - v_t) / dt`. Speeds are non-negative; reverse driving
//! is not represented.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};

pub const DEFAULT_DT: f64 = 0.5;
pub const DEFAULT_EPS: f64 = 0.1;

const TWO_PI: f64 = 2.0 * PI;

/// Planar pose sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    /// Heading in (-π, π].
    pub yaw: f64,
}

impl EgoState {
    /// Builds a pose, wrapping `yaw` into (-π, π].
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        EgoState {
            x,
            y,
            yaw: wrap_angle_unchecked(yaw),
        }
    }

    pub fn distance(&self, other: &EgoState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Expresses `other` in the frame of `self` (x forward, y left).
    pub fn to_local(&self, other: &EgoState) -> EgoState {
        let (s, c) = self.yaw.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        EgoState::new(c * dx + s * dy, -s * dx + c * dy, other.yaw - self.yaw)
    }

    /// Inverse of [`EgoState::to_local`].
    pub fn from_local(&self, local: &EgoState) -> EgoState {
        let (s, c) = self.yaw.sin_cos();
        EgoState::new(
            self.x + c * local.x - s * local.y,
            self.y + s * local.x + c * local.y,
            self.yaw + local.yaw,
        )
    }
}

/// Curvature–acceleration pair.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct KaPoint {
    pub kappa: f64,
    pub a: f64,
}

impl KaPoint {
    pub fn new(kappa: f64, a: f64) -> Self {
        KaPoint { kappa, a }
    }
}

/// Finite-difference kinematic rates at one sample.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RateSample {
    pub v: f64,
    pub omega: f64,
    pub alpha: f64,
    /// Acceleration change since the previous step (m/s²).
    pub delta_a: f64,
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(DapError::Domain(format!(
            "cannot wrap non-finite angle {theta}"
        )));
    }
    Ok(wrap_angle_unchecked(theta))
}

/// [`wrap_angle`] for inputs already known to be finite. Values inside
/// (-π, π] are returned bit-for-bit, which makes the map idempotent.
pub fn wrap_angle_unchecked(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(TWO_PI);
    if r > PI {
        r - TWO_PI
    } else if r <= -PI {
        r + TWO_PI
    } else {
        r
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DapError::Domain(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

fn step_speeds(states: &[EgoState], dt: f64) -> Vec<f64> {
    states
        .windows(2)
        .map(|w| w[0].distance(&w[1]) / dt)
        .collect()
}

fn step_yaw_rates(states: &[EgoState], dt: f64) -> Vec<f64> {
    states
        .windows(2)
        .map(|w| wrap_angle_unchecked(w[1].yaw - w[0].yaw) / dt)
        .collect()
}

/// Converts `n + 2` poses into `n` curvature–acceleration samples.
pub fn states_to_ka(states: &[EgoState], dt: f64, eps: f64) -> Result<Vec<KaPoint>> {
    if states.len() < 3 {
        return Err(DapError::Size(format!(
            "states_to_ka needs at least 3 poses, got {}",
            states.len()
        )));
    }
    check_dt(dt)?;
    if !(eps > 0.0) {
        return Err(DapError::Domain(format!("eps must be positive, got {eps}")));
    }
    let v = step_speeds(states, dt);
    let omega = step_yaw_rates(states, dt);
    let n = states.len() - 2;
    Ok((0..n)
        .map(|t| KaPoint {
            kappa: omega[t] / v[t].max(eps),
            a: (v[t + 1] - v[t]) / dt,
        })
        .collect())
}

/// Forward-integrates a curvature–acceleration sequence from `start`.
///
/// Positions advance by `v_t·dt` along the midpoint heading
/// `ψ_t + ½κ_t v_t dt`, which is exact for constant-curvature steps.
/// Speed floors at zero. Returns `ka.len() + 1` poses including `start`.
pub fn ka_rollout(start: EgoState, v0: f64, ka: &[KaPoint], dt: f64) -> Result<Vec<EgoState>> {
    Ok(ka_rollout_with_speeds(start, v0, ka, dt)?.0)
}

/// [`ka_rollout`] that also returns the speed in effect at every pose.
pub fn ka_rollout_with_speeds(
    start: EgoState,
    v0: f64,
    ka: &[KaPoint],
    dt: f64,
) -> Result<(Vec<EgoState>, Vec<f64>)> {
    check_dt(dt)?;
    if !(start.x.is_finite() && start.y.is_finite() && start.yaw.is_finite() && v0.is_finite()) {
        return Err(DapError::Domain("non-finite rollout start".into()));
    }
    let mut states = Vec::with_capacity(ka.len() + 1);
    let mut speeds = Vec::with_capacity(ka.len() + 1);
    let mut s = start;
    let mut v = v0.max(0.0);
    states.push(s);
    speeds.push(v);
    for p in ka {
        if !(p.kappa.is_finite() && p.a.is_finite()) {
            return Err(DapError::Domain("non-finite curvature/acceleration".into()));
        }
        s = integrate_step(s, v, *p, dt);
        v = (v + p.a * dt).max(0.0);
        states.push(s);
        speeds.push(v);
    }
    Ok((states, speeds))
}

/// One midpoint-heading step at speed `v`.
pub fn integrate_step(s: EgoState, v: f64, ka: KaPoint, dt: f64) -> EgoState {
    let dpsi = ka.kappa * v * dt;
    let mid = s.yaw + 0.5 * dpsi;
    let (sn, cs) = mid.sin_cos();
    EgoState::new(s.x + v * dt * cs, s.y + v * dt * sn, s.yaw + dpsi)
}

/// Speed, yaw rate, angular acceleration and acceleration change for a pose
/// sequence of length `n ≥ 3`; returns `n - 2` samples.
///
/// `alpha_t = (ω_{t+1} - ω_t)/dt`; `delta_a_t = a_t - a_{t-1}` with the
/// first sample's change taken as zero.
pub fn finite_diff_rates(states: &[EgoState], dt: f64) -> Result<Vec<RateSample>> {
    if states.len() < 3 {
        return Err(DapError::Size(format!(
            "finite_diff_rates needs at least 3 poses, got {}",
            states.len()
        )));
    }
    check_dt(dt)?;
    let v = step_speeds(states, dt);
    let omega = step_yaw_rates(states, dt);
    let n = states.len() - 2;
    let acc: Vec<f64> = (0..n).map(|t| (v[t + 1] - v[t]) / dt).collect();
    Ok((0..n)
        .map(|t| RateSample {
            v: v[t],
            omega: omega[t],
            alpha: (omega[t + 1] - omega[t]) / dt,
            delta_a: if t == 0 { 0.0 } else { acc[t] - acc[t - 1] },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(v: f64, dt: f64, n: usize, yaw: f64) -> Vec<EgoState> {
        (0..n)
            .map(|i| {
                let d = v * dt * i as f64;
                EgoState::new(d * yaw.cos(), d * yaw.sin(), yaw)
            })
            .collect()
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!((wrap_angle(3.0 * PI).unwrap() - PI).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * PI).unwrap() - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(-PI).unwrap(), PI);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn straight_line_has_zero_ka() {
        let s = line(3.0, 0.5, 8, 0.7);
        for p in states_to_ka(&s, 0.5, 0.1).unwrap() {
            assert!(p.kappa.abs() < 1e-12 && p.a.abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn stationary_points_have_zero_curvature() {
        let s = vec![EgoState::new(1.0, 2.0, 0.3); 5];
        let ka = states_to_ka(&s, 0.5, 0.1).unwrap();
        assert_eq!(ka.len(), 3);
        assert!(ka.iter().all(|p| p.kappa == 0.0 && p.a == 0.0));
    }

    #[test]
    fn short_input_is_size_error() {
        let s = line(1.0, 0.5, 2, 0.0);
        assert!(matches!(states_to_ka(&s, 0.5, 0.1), Err(DapError::Size(_))));
        assert!(matches!(finite_diff_rates(&s, 0.5), Err(DapError::Size(_))));
    }

    #[test]
    fn circle_curvature_converges() {
        // Analytic circle of radius r at speed v: κ = 1/r.
        let r = 20.0;
        let v = 5.0;
        for &dt in &[0.5, 0.1, 0.02] {
            let states: Vec<EgoState> = (0..6)
                .map(|i| {
                    let th = v * dt * i as f64 / r;
                    EgoState::new(r * th.sin(), r * (1.0 - th.cos()), th)
                })
                .collect();
            let ka = states_to_ka(&states, dt, 0.1).unwrap();
            // Chord speed underestimates arc speed by O(dt²); κ error is O(dt).
            let bound = 2.0 * dt * v / (r * r);
            for p in ka {
                assert!(
                    (p.kappa - 1.0 / r).abs() <= bound.max(1e-9),
                    "dt={dt} {p:?}"
                );
            }
        }
    }

    #[test]
    fn rollout_examples() {
        let start = EgoState::new(1.0, -1.0, 0.4);
        assert_eq!(ka_rollout(start, 3.0, &[], 0.5).unwrap(), vec![start]);

        let out = ka_rollout(
            EgoState::new(0.0, 0.0, 0.0),
            2.0,
            &[KaPoint::default(); 4],
            0.5,
        )
        .unwrap();
        assert_eq!(out.len(), 5);
        let last = out[4];
        assert!((last.x - 4.0).abs() < 1e-12 && last.y.abs() < 1e-12);
    }

    #[test]
    fn rollout_on_saturated_curvature_stays_on_circle() {
        let kappa = 0.22;
        let ka = vec![KaPoint::new(kappa, 0.0); 40];
        let states = ka_rollout(EgoState::new(0.0, 0.0, 0.0), 4.0, &ka, 0.5).unwrap();
        // Equal chords of length v·dt turning by κ·v·dt: vertices of a regular
        // polygon with circumradius v·dt / (2 sin(κ·v·dt / 2)) centered at (0, R).
        let step = 4.0 * 0.5;
        let radius = step / (2.0 * (kappa * step / 2.0).sin());
        for s in states {
            let r = s.x.hypot(s.y - radius);
            assert!((r - radius).abs() < 1e-9);
        }
    }

    #[test]
    fn rates_on_constant_velocity_and_acceleration() {
        let s = line(4.0, 0.5, 6, 0.0);
        for r in finite_diff_rates(&s, 0.5).unwrap() {
            assert!((r.v - 4.0).abs() < 1e-12);
            assert!(r.omega.abs() < 1e-12 && r.alpha.abs() < 1e-12 && r.delta_a.abs() < 1e-12);
        }
        // x(t) = t²/2 sampled so that each step's chord speed grows by dt.
        let dt = 0.5;
        let s: Vec<EgoState> = (0..8)
            .map(|i| {
                let t = i as f64 * dt;
                EgoState::new(0.5 * t * t, 0.0, 0.0)
            })
            .collect();
        let rates = finite_diff_rates(&s, dt).unwrap();
        for w in rates.windows(2) {
            assert!((w[1].v - w[0].v - dt).abs() < 1e-12);
            assert!(w[1].delta_a.abs() < 1e-12);
        }
    }

    #[test]
    fn rates_match_polynomial_derivatives() {
        // Path x = t + 0.1t², y = 0.05t³, heading from the analytic tangent.
        let dt = 0.01;
        let pos = |t: f64| (t + 0.1 * t * t, 0.05 * t * t * t);
        let vel = |t: f64| (1.0 + 0.2 * t, 0.15 * t * t);
        let states: Vec<EgoState> = (0..200)
            .map(|i| {
                let t = i as f64 * dt;
                let (x, y) = pos(t);
                let (vx, vy) = vel(t);
                EgoState::new(x, y, vy.atan2(vx))
            })
            .collect();
        let rates = finite_diff_rates(&states, dt).unwrap();
        for (i, r) in rates.iter().enumerate().step_by(17) {
            let t = i as f64 * dt;
            let (vx, vy) = vel(t);
            let speed = vx.hypot(vy);
            // ω = (vx·ay − vy·ax)/|v|²
            let (ax, ay) = (0.2, 0.3 * t);
            let omega = (vx * ay - vy * ax) / (speed * speed);
            assert!((r.v - speed).abs() < 5.0 * dt, "v {} vs {}", r.v, speed);
            assert!(
                (r.omega - omega).abs() < 5.0 * dt,
                "ω {} vs {}",
                r.omega,
                omega
            );
        }
    }

    #[test]
    fn local_frame_round_trip() {
        let o = EgoState::new(3.0, -2.0, 1.1);
        let p = EgoState::new(-4.0, 7.5, -2.9);
        let back = o.from_local(&o.to_local(&p));
        assert!((back.x - p.x).abs() < 1e-12 && (back.y - p.y).abs() < 1e-12);
        assert!(wrap_angle_unchecked(back.yaw - p.yaw).abs() < 1e-12);
    }

    fn smooth_path(k0: f64, k1: f64, v: f64, a: f64, n: usize) -> Vec<EgoState> {
        let ka: Vec<KaPoint> = (0..n)
            .map(|i| KaPoint::new(k0 + k1 * (i as f64 * 0.3).sin(), a * (i as f64 * 0.2).cos()))
            .collect();
        ka_rollout(EgoState::new(0.0, 0.0, 0.0), v, &ka, 0.5).unwrap()
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_periodic(x in -50.0f64..50.0, k in -5i32..5) {
            let w = wrap_angle(x).unwrap();
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w).unwrap(), w);
            let shifted = wrap_angle(x + TWO_PI * k as f64).unwrap();
            let d = (shifted - w).abs();
            prop_assert!(d < 1e-9 || (d - TWO_PI).abs() < 1e-9);
        }

        #[test]
        fn ka_is_rigid_motion_invariant(
            k0 in -0.1f64..0.1, k1 in 0.0f64..0.1, v in 1.0f64..10.0, a in -1.0f64..1.0,
            tx in -100.0f64..100.0, ty in -100.0f64..100.0, rot in -3.0f64..3.0,
        ) {
            let s = smooth_path(k0, k1, v, a, 10);
            let frame = EgoState::new(tx, ty, rot);
            let moved: Vec<EgoState> = s.iter().map(|p| frame.from_local(p)).collect();
            let ka0 = states_to_ka(&s, 0.5, 0.1).unwrap();
            let ka1 = states_to_ka(&moved, 0.5, 0.1).unwrap();
            for (p, q) in ka0.iter().zip(&ka1) {
                prop_assert!((p.kappa - q.kappa).abs() < 1e-9);
                prop_assert!((p.a - q.a).abs() < 1e-9);
            }
        }

        #[test]
        fn continuous_round_trip_reproduces_positions(
            k0 in -0.1f64..0.1, k1 in 0.0f64..0.1, v in 2.0f64..10.0, a in -0.5f64..0.5,
        ) {
            // Rollout output is piecewise circular, so the inverse map is exact
            // up to rounding.
            let s = smooth_path(k0, k1, v, a, 12);
            let ka = states_to_ka(&s, 0.5, 0.1).unwrap();
            let v0 = s[0].distance(&s[1]) / 0.5;
            let back = ka_rollout(s[0], v0, &ka, 0.5).unwrap();
            let ade: f64 = back.iter().zip(&s).map(|(p, q)| p.distance(q)).sum::<f64>() / back.len() as f64;
            prop_assert!(ade < 1e-9, "ade {}", ade);
        }
    }
}
