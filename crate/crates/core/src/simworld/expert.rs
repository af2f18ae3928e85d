//! Demonstration driver: pure-pursuit steering toward the centerline and
//! IDM car-following, snapped to curvature–acceleration bin centers.

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};
use crate::kinematics::{wrap_angle_unchecked, EgoState, KaPoint};
use crate::tokenize::KaGridConfig;

use super::scene::{Scene, EGO_HALF_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Look-ahead distance `max(lookahead_min, lookahead_time · v)`.
    pub lookahead_min: f64,
    pub lookahead_time: f64,
    /// Look-ahead used while outside the corridor.
    pub recovery_lookahead: f64,
    /// Lateral acceleration bound that caps speed on curves.
    pub lat_accel_max: f64,
    /// Arc length scanned ahead for the curve speed cap.
    pub curve_preview: f64,
    pub idm_accel: f64,
    pub idm_decel: f64,
    pub idm_headway: f64,
    pub idm_min_gap: f64,
    pub idm_delta: f64,
    /// Snap outputs to grid bin centers so every action is an exact token.
    pub snap: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            lookahead_min: 6.0,
            lookahead_time: 1.2,
            recovery_lookahead: 4.0,
            lat_accel_max: 2.0,
            curve_preview: 30.0,
            idm_accel: 1.0,
            idm_decel: 1.2,
            idm_headway: 1.5,
            idm_min_gap: 4.0,
            idm_delta: 4.0,
            snap: true,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.lookahead_min,
            self.recovery_lookahead,
            self.lat_accel_max,
            self.idm_accel,
            self.idm_decel,
            self.idm_headway,
            self.idm_min_gap,
            self.idm_delta,
        ];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(self.lookahead_time >= 0.0 && self.curve_preview >= 0.0)
        {
            return Err(DapError::Config(
                "expert gains must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertAction {
    pub ka: KaPoint,
    /// Set when the ego was outside the corridor and recovery steering was used.
    pub recovering: bool,
}

/// Clamps to the grid range and, when `snap`, moves to the containing bin center.
pub fn fit_to_grid(ka: KaPoint, grid: &KaGridConfig, snap: bool) -> KaPoint {
    let k = ka.kappa.clamp(grid.kappa.lo(), grid.kappa.hi());
    let a = ka.a.clamp(grid.accel.lo(), grid.accel.hi());
    if snap {
        KaPoint::new(
            grid.kappa.dequantize(grid.kappa.quantize(k)),
            grid.accel.dequantize(grid.accel.quantize(a)),
        )
    } else {
        KaPoint::new(k, a)
    }
}

/// Nearest in-lane agent ahead at time `t`: bumper gap and its speed.
fn lead_gap(scene: &Scene, s_ego: f64, t: f64) -> Option<(f64, f64)> {
    scene
        .agents
        .iter()
        .filter(|a| a.l.abs() < scene.lane_half_width)
        .filter_map(|a| {
            let s = scene.agent_s(a, t);
            (s > s_ego).then_some((s - s_ego - a.half_len - EGO_HALF_LEN, a.speed))
        })
        .min_by(|x, y| x.0.total_cmp(&y.0))
}

/// IDM acceleration toward `v0` behind an optional `(gap, lead_speed)`.
pub fn idm_accel(v: f64, v0: f64, lead: Option<(f64, f64)>, cfg: &ExpertConfig) -> f64 {
    let free = 1.0 - (v / v0.max(1e-3)).powf(cfg.idm_delta);
    let interact = match lead {
        Some((gap, vl)) => {
            let dv = v - vl;
            let s_star = cfg.idm_min_gap
                + (v * cfg.idm_headway + v * dv / (2.0 * (cfg.idm_accel * cfg.idm_decel).sqrt()))
                    .max(0.0);
            (s_star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    cfg.idm_accel * (free - interact)
}

/// Expert action for `state` at speed `v` and time `t`.
pub fn expert_policy(
    scene: &Scene,
    state: &EgoState,
    v: f64,
    t: f64,
    cfg: &ExpertConfig,
    grid: &KaGridConfig,
) -> ExpertAction {
    let proj = scene.lane.project(state.x, state.y);
    let recovering = !scene.in_corridor(state);
    let ld = if recovering {
        cfg.recovery_lookahead
    } else {
        cfg.lookahead_min.max(cfg.lookahead_time * v)
    };
    let target = scene.lane.pose_at(proj.s + ld);
    let local = state.to_local(&target);
    let dist = local.x.hypot(local.y).max(1e-6);
    let alpha = wrap_angle_unchecked(local.y.atan2(local.x));
    let kappa = 2.0 * alpha.sin() / dist;

    let mut kmax: f64 = 0.0;
    let mut s = proj.s;
    let lane = &scene.lane;
    while s <= proj.s + cfg.curve_preview {
        let (a, b) = (lane.pose_at(s), lane.pose_at(s + 1.0));
        kmax = kmax.max(wrap_angle_unchecked(b.yaw - a.yaw).abs());
        s += 1.0;
    }
    let mut v0 = scene.cruise_speed;
    if kmax > 0.0 {
        v0 = v0.min((cfg.lat_accel_max / kmax).sqrt());
    }
    if recovering {
        v0 = v0.min(3.0);
    }
    let a = idm_accel(v, v0, lead_gap(scene, proj.s, t), cfg);
    ExpertAction {
        ka: fit_to_grid(KaPoint::new(kappa, a), grid, cfg.snap),
        recovering,
    }
}
