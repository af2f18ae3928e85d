//! Closed-loop transition, geometric distances, frame rewards and
//! time-to-collision.

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};
use crate::kinematics::{finite_diff_rates, integrate_step, EgoState, KaPoint};
use crate::rl::{reward_components, RewardComponents, RewardWeights};

use super::geometry::{overlaps, rect_distance};
use super::scene::{ego_rect, Scene};

/// Clearance reported when nothing is closer; the BEV half-extent.
pub const CLEARANCE_CAP: f64 = 16.0;
/// Extrapolation horizon of the time-to-collision query.
pub const TTC_HORIZON: f64 = 4.0;
pub const TTC_RESOLUTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub collision: bool,
    pub offroad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub d_ctr: f64,
    pub d_clr: f64,
}

/// Whether the ego footprint at `pose` touches any obstacle or agent at time `t`.
pub fn in_collision(scene: &Scene, pose: &EgoState, t: f64) -> bool {
    let ego = ego_rect(pose);
    scene.occupied(t).iter().any(|r| overlaps(&ego, r))
}

pub fn flags_at(scene: &Scene, pose: &EgoState, t: f64) -> StepFlags {
    StepFlags {
        collision: in_collision(scene, pose, t),
        offroad: !scene.in_corridor(pose),
    }
}

/// Advances the ego by one curvature–acceleration step from time `t`;
/// agents are evaluated at `t + dt`.
pub fn step(
    scene: &Scene,
    ego: EgoState,
    v: f64,
    action: KaPoint,
    dt: f64,
    t: f64,
) -> Result<(EgoState, f64, StepFlags)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DapError::Domain(format!("dt must be positive, got {dt}")));
    }
    if !(action.kappa.is_finite() && action.a.is_finite() && v.is_finite()) {
        return Err(DapError::Domain("non-finite action or speed".into()));
    }
    let v = v.max(0.0);
    let next = integrate_step(ego, v, action, dt);
    let v_next = (v + action.a * dt).max(0.0);
    Ok((next, v_next, flags_at(scene, &next, t + dt)))
}

/// Centerline distance of the ego centre and capped clearance of its footprint.
pub fn distances(scene: &Scene, ego: &EgoState, t: f64) -> Distances {
    let rect = ego_rect(ego);
    let d_clr = scene
        .occupied(t)
        .iter()
        .map(|r| rect_distance(&rect, r))
        .fold(CLEARANCE_CAP, f64::min);
    Distances {
        d_ctr: scene.lane.distance(ego.x, ego.y),
        d_clr,
    }
}

/// Reward components at frame `i` of a pose sequence sampled every `dt`
/// starting at time `t0`. Comfort uses the last rate sample over
/// `poses[i-3..=i]` and is zero before the third pose.
pub fn frame_reward(
    scene: &Scene,
    poses: &[EgoState],
    i: usize,
    t0: f64,
    dt: f64,
    w: &RewardWeights,
) -> Result<(RewardComponents, Distances)> {
    let d = distances(scene, &poses[i], t0 + i as f64 * dt);
    let (da, alpha, v) = if i >= 2 {
        let r = *finite_diff_rates(&poses[i.saturating_sub(3)..=i], dt)?
            .last()
            .unwrap();
        (r.delta_a, r.alpha, r.v)
    } else {
        (0.0, 0.0, 0.0)
    };
    Ok((reward_components(d.d_ctr, d.d_clr, da, alpha, v, w)?, d))
}

/// Earliest time in `[0, TTC_HORIZON]` at which the ego, extrapolated at
/// constant speed and curvature, touches an obstacle or agent; infinity if none.
pub fn time_to_collision(scene: &Scene, ego: EgoState, v: f64, kappa: f64, t: f64) -> f64 {
    let n = (TTC_HORIZON / TTC_RESOLUTION).round() as usize;
    let mut pose = ego;
    for k in 0..=n {
        let tau = k as f64 * TTC_RESOLUTION;
        if in_collision(scene, &pose, t + tau) {
            return tau;
        }
        pose = integrate_step(pose, v, KaPoint::new(kappa, 0.0), TTC_RESOLUTION);
    }
    f64::INFINITY
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::geometry::Rect;
    use crate::simworld::scene::{build_scene, Difficulty, EGO_HALF_LEN};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight() -> Scene {
        build_scene(1, Difficulty::Straight)
    }

    fn with_block(x: f64) -> Scene {
        let mut s = straight();
        s.obstacles.push(Rect {
            cx: x,
            cy: 0.0,
            yaw: 0.0,
            half_len: 1.0,
            half_wid: 1.0,
        });
        s
    }

    #[test]
    fn zero_action_from_rest_stays_put() {
        let s = straight();
        let p = EgoState::new(10.0, 0.0, 0.0);
        let (q, v, f) = step(&s, p, 0.0, KaPoint::default(), 0.5, 0.0).unwrap();
        assert_eq!((q, v), (p, 0.0));
        assert_eq!(f, StepFlags::default());
        assert!(step(&s, p, 0.0, KaPoint::default(), 0.0, 0.0).is_err());
    }

    #[test]
    fn head_on_collision_step_count() {
        let (x0, v, dt) = (40.0, 5.0, 0.5);
        let s = with_block(x0);
        // Contact once the front bumper passes the obstacle's near face.
        let gap = (x0 - 1.0) - EGO_HALF_LEN - 10.0;
        let expected = (gap / (v * dt)).ceil() as usize;
        let mut p = EgoState::new(10.0, 0.0, 0.0);
        let mut hit = None;
        for k in 1..100 {
            let (q, _, f) = step(&s, p, v, KaPoint::default(), dt, 0.0).unwrap();
            p = q;
            if f.collision {
                hit = Some(k);
                break;
            }
        }
        assert_eq!(hit, Some(expected));
        let near = (x0 - 1.0) - EGO_HALF_LEN - 20.0;
        let ttc = time_to_collision(&s, EgoState::new(20.0, 0.0, 0.0), v, 0.0, 0.0);
        assert!(
            ttc >= near / v - 1e-9 && ttc <= near / v + TTC_RESOLUTION + 1e-9,
            "{ttc}"
        );
    }

    #[test]
    fn saturated_curvature_traces_circle() {
        let kmax = 0.215;
        let (v, dt) = (4.0, 0.5);
        let mut p = EgoState::new(0.0, 0.0, 0.0);
        let mut pts = vec![p];
        for _ in 0..20 {
            p = integrate_step(p, v, KaPoint::new(kmax, 0.0), dt);
            pts.push(p);
        }
        // Vertices sit on the circumcircle of chord length v·dt.
        let step = v * dt;
        let r = step / (2.0 * (0.5 * kmax * step).sin());
        for q in &pts {
            assert!((q.x.hypot(q.y - r) - r).abs() < 1e-9);
        }
        let rel = (r * kmax - 1.0).abs();
        assert!(rel <= (kmax * step).powi(2) / 24.0 * 1.01, "{rel}");
    }

    #[test]
    fn distance_examples() {
        let s = straight();
        let d = distances(&s, &EgoState::new(20.0, 0.0, 0.0), 0.0);
        assert_eq!(d.d_ctr, 0.0);
        assert_eq!(d.d_clr, CLEARANCE_CAP);
        let s = with_block(22.0);
        assert_eq!(
            distances(&s, &EgoState::new(20.0, 0.0, 0.0), 0.0).d_clr,
            0.0
        );
    }

    #[test]
    fn clearance_matches_boundary_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = build_scene(5, Difficulty::Hard);
        let sample = |r: &Rect| -> Vec<(f64, f64)> {
            let c = r.corners();
            (0..4)
                .flat_map(|i| {
                    let (a, b) = (c[i], c[(i + 1) % 4]);
                    (0..=400).map(move |k| {
                        let t = k as f64 / 400.0;
                        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
                    })
                })
                .collect()
        };
        for _ in 0..30 {
            let sa = rng.gen_range(10.0..150.0);
            let p = s.lane.lift(sa, rng.gen_range(-3.0..3.0));
            let pose = EgoState::new(p.x, p.y, p.yaw + rng.gen_range(-0.5..0.5));
            let t = rng.gen_range(0.0..10.0);
            let d = distances(&s, &pose, t).d_clr;
            let ego = sample(&ego_rect(&pose));
            let mut brute = CLEARANCE_CAP;
            for r in s.occupied(t) {
                if overlaps(&ego_rect(&pose), &r) {
                    brute = 0.0;
                    continue;
                }
                if (r.cx - pose.x).hypot(r.cy - pose.y) > CLEARANCE_CAP + 10.0 {
                    continue;
                }
                for q in sample(&r) {
                    for e in &ego {
                        brute = brute.min((q.0 - e.0).hypot(q.1 - e.1));
                    }
                }
            }
            // Edge sampling overestimates by at most h²/8d; skip near-contact.
            if brute < 0.05 && brute > 0.0 {
                continue;
            }
            assert!((d - brute).abs() <= 1e-3, "{d} vs {brute}");
        }
    }
}
