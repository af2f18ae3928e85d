//! Rule-based trajectory refinement: lane anchors, Frenet-frame smoothing
//! and rate-limited yaw.

pub mod frenet;
pub mod lane;
pub mod smooth;
pub mod yaw;

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};
use crate::kinematics::EgoState;

pub use frenet::{frenet_lift, frenet_project, FrenetPoint, Reference};
pub use lane::{lane_anchor, Anchor, LaneLikelihoodMap};
pub use smooth::{isotonic, objective, smooth_1d, solve_lateral, solve_longitudinal, Longitudinal};
pub use yaw::recompute_yaw;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherWeights {
    pub w_l1: f64,
    pub w_l2: f64,
    pub w_s1: f64,
    pub w_s2: f64,
    /// Radians per step.
    pub yaw_rate_limit: f64,
    /// Gradient-ascent step, in cells.
    pub ascent_step: f64,
    pub ascent_iters: usize,
}

impl Default for SmootherWeights {
    fn default() -> Self {
        SmootherWeights {
            w_l1: 0.5,
            w_l2: 2.0,
            w_s1: 0.1,
            w_s2: 1.0,
            yaw_rate_limit: 0.3,
            ascent_step: 0.25,
            ascent_iters: 50,
        }
    }
}

impl SmootherWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_l1,
            self.w_l2,
            self.w_s1,
            self.w_s2,
            self.yaw_rate_limit,
            self.ascent_step,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DapError::Config(
                "post-tuning weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Polyline defining the Frenet frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSource {
    /// Lane centerline from scene geometry.
    #[default]
    Lane,
    /// The raw trajectory itself.
    Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub lateral_objective: f64,
    /// Lateral objective at `Δℓ = 0`.
    pub lateral_objective_zero: f64,
    /// Lateral objective at `Δℓ = gap`.
    pub lateral_objective_snap: f64,
    pub longitudinal_objective: f64,
    /// Largest planar waypoint displacement, meters.
    pub max_displacement: f64,
    /// Waypoints outside the lane map, left without an anchor pull.
    pub anchors_outside: usize,
    pub anchors: Vec<Anchor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostTuneOutput {
    pub trajectory: Vec<EgoState>,
    pub diagnostics: Diagnostics,
}

fn at_stage(stage: &str, e: DapError) -> DapError {
    let tag = |m: String| format!("post-tuning {stage}: {m}");
    match e {
        DapError::Domain(m) => DapError::Domain(tag(m)),
        DapError::Size(m) => DapError::Size(tag(m)),
        DapError::Config(m) => DapError::Config(tag(m)),
        DapError::Validation(m) => DapError::Validation(tag(m)),
        DapError::Internal(m) => DapError::Internal(tag(m)),
        other => other,
    }
}

/// Anchors → Frenet → lateral solve → longitudinal solve → lift → yaw.
pub fn posttune_pipeline(
    trajectory: &[EgoState],
    map: &LaneLikelihoodMap,
    reference: &[(f64, f64)],
    w: &SmootherWeights,
) -> Result<PostTuneOutput> {
    w.validate().map_err(|e| at_stage("weights", e))?;
    if trajectory.len() < 3 {
        return Err(at_stage(
            "input",
            DapError::Size(format!(
                "needs at least 3 waypoints, got {}",
                trajectory.len()
            )),
        ));
    }
    map.validate().map_err(|e| at_stage("lane map", e))?;
    let reference = Reference::new(reference).map_err(|e| at_stage("frenet", e))?;

    let xy: Vec<(f64, f64)> = trajectory.iter().map(|s| (s.x, s.y)).collect();
    let anchors: Vec<Anchor> = xy
        .iter()
        .map(|&(x, y)| lane_anchor(map, x, y, w.ascent_step, w.ascent_iters))
        .collect();
    let fr = frenet_project(&xy, &reference);
    let fa = frenet_project(
        &anchors.iter().map(|a| (a.x, a.y)).collect::<Vec<_>>(),
        &reference,
    );
    let gap: Vec<f64> = fa.iter().zip(&fr).map(|(a, p)| a.l - p.l).collect();

    let dl = solve_lateral(&gap, w.w_l1, w.w_l2).map_err(|e| at_stage("lateral", e))?;
    let s_raw: Vec<f64> = fr.iter().map(|p| p.s).collect();
    let long =
        solve_longitudinal(&s_raw, w.w_s1, w.w_s2).map_err(|e| at_stage("longitudinal", e))?;

    let refined: Vec<FrenetPoint> = fr
        .iter()
        .zip(&dl)
        .zip(&long.s)
        .map(|((p, d), &s)| FrenetPoint { s, l: p.l + d })
        .collect();
    let out_xy = frenet_lift(&refined, &reference);
    let yaw = recompute_yaw(&out_xy, w.yaw_rate_limit).map_err(|e| at_stage("yaw", e))?;
    let out: Vec<EgoState> = out_xy
        .iter()
        .zip(&yaw)
        .map(|(&(x, y), &psi)| EgoState::new(x, y, psi))
        .collect();

    let max_displacement = xy
        .iter()
        .zip(&out_xy)
        .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1))
        .fold(0.0, f64::max);
    let zeros = vec![0.0; gap.len()];
    Ok(PostTuneOutput {
        trajectory: out,
        diagnostics: Diagnostics {
            lateral_objective: objective(&dl, &gap, w.w_l1, w.w_l2),
            lateral_objective_zero: objective(&zeros, &gap, w.w_l1, w.w_l2),
            lateral_objective_snap: objective(&gap, &gap, w.w_l1, w.w_l2),
            longitudinal_objective: objective(&long.smoothed, &s_raw, w.w_s1, w.w_s2),
            max_displacement,
            anchors_outside: anchors.iter().filter(|a| a.outside).count(),
            anchors,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gaussian ridge along `y = 0`, sampled at 0.25 m.
    fn straight_lane(sigma: f64) -> LaneLikelihoodMap {
        LaneLikelihoodMap::from_fn(41, 161, 0.25, (-5.0, -5.0), |_, y| {
            (-(y * y) / (2.0 * sigma * sigma)).exp()
        })
        .unwrap()
    }

    fn second_diff_energy(l: &[f64]) -> f64 {
        l.windows(3)
            .map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2))
            .sum()
    }

    #[test]
    fn identity_on_lane_ridge() {
        let map = straight_lane(0.5);
        let traj: Vec<EgoState> = (0..10)
            .map(|i| EgoState::new(2.5 * i as f64, 0.0, 0.0))
            .collect();
        let w = SmootherWeights {
            w_s1: 0.0,
            ..Default::default()
        };
        let out = posttune_pipeline(&traj, &map, &[(-5.0, 0.0), (40.0, 0.0)], &w).unwrap();
        for (a, b) in traj.iter().zip(&out.trajectory) {
            assert!(
                (a.x - b.x).abs() < 1e-6
                    && (a.y - b.y).abs() < 1e-6
                    && (a.yaw - b.yaw).abs() < 1e-6
            );
        }
        assert!(out.diagnostics.max_displacement < 1e-6);
    }

    #[test]
    fn zigzag_energy_decreases_and_certificate_holds() {
        let map = straight_lane(0.5);
        let traj: Vec<EgoState> = (0..12)
            .map(|i| EgoState::new(2.5 * i as f64, if i % 2 == 0 { 0.3 } else { -0.3 }, 0.0))
            .collect();
        let reference = [(-5.0, 0.0), (40.0, 0.0)];
        let out = posttune_pipeline(&traj, &map, &reference, &SmootherWeights::default()).unwrap();
        let r = Reference::new(&reference).unwrap();
        let l_in: Vec<f64> = traj.iter().map(|s| r.project(s.x, s.y).l).collect();
        let l_out: Vec<f64> = out
            .trajectory
            .iter()
            .map(|s| r.project(s.x, s.y).l)
            .collect();
        assert!(second_diff_energy(&l_out) <= second_diff_energy(&l_in));
        let d = &out.diagnostics;
        assert!(
            d.lateral_objective <= d.lateral_objective_zero
                && d.lateral_objective <= d.lateral_objective_snap
        );
        for w in out.trajectory.windows(2) {
            assert!(
                crate::kinematics::wrap_angle_unchecked(w[1].yaw - w[0].yaw).abs() <= 0.3 + 1e-12
            );
        }
    }

    #[test]
    fn second_pass_moves_little() {
        let map = straight_lane(0.6);
        let traj: Vec<EgoState> = (0..10)
            .map(|i| EgoState::new(2.0 * i as f64, 0.4 * (0.9 * i as f64).sin(), 0.0))
            .collect();
        let reference = [(-5.0, 0.0), (40.0, 0.0)];
        let w = SmootherWeights::default();
        let first = posttune_pipeline(&traj, &map, &reference, &w).unwrap();
        let second = posttune_pipeline(&first.trajectory, &map, &reference, &w).unwrap();
        assert!(second.diagnostics.max_displacement <= 10.0 * first.diagnostics.max_displacement);
    }

    #[test]
    fn errors_carry_stage() {
        let map = straight_lane(0.5);
        let traj: Vec<EgoState> = (0..4).map(|i| EgoState::new(i as f64, 0.0, 0.0)).collect();
        let e =
            posttune_pipeline(&traj, &map, &[(0.0, 0.0)], &SmootherWeights::default()).unwrap_err();
        assert!(
            matches!(&e, DapError::Config(m) if m.contains("frenet")),
            "{e}"
        );
        let e = posttune_pipeline(
            &traj[..2],
            &map,
            &[(0.0, 0.0), (1.0, 0.0)],
            &SmootherWeights::default(),
        )
        .unwrap_err();
        assert!(matches!(e, DapError::Size(_)));
        let bad = SmootherWeights {
            w_l2: -1.0,
            ..Default::default()
        };
        assert!(posttune_pipeline(&traj, &map, &[(0.0, 0.0), (1.0, 0.0)], &bad).is_err());
    }

    #[test]
    fn waypoints_off_map_are_counted() {
        let map = straight_lane(0.5);
        let traj: Vec<EgoState> = (0..6)
            .map(|i| EgoState::new(10.0 * i as f64, 0.2, 0.0))
            .collect();
        let out = posttune_pipeline(
            &traj,
            &map,
            &[(0.0, 0.0), (1.0, 0.0)],
            &SmootherWeights::default(),
        )
        .unwrap();
        assert_eq!(out.diagnostics.anchors_outside, 2);
    }
}
