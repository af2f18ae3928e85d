//! Ego-centric semantic BEV rasterization and the lane-likelihood map.

use serde::{Deserialize, Serialize};

use crate::bevq::{class, BevGrid};
use crate::error::{DapError, Result};
use crate::kinematics::EgoState;
use crate::posttune::LaneLikelihoodMap;

use super::scene::{ego_rect, Scene};

/// Half-width of the lane-center band class.
pub const CENTER_BAND: f64 = 0.5;

/// Grid geometry: row 0 is the far-forward edge, column 0 the far-left edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevConfig {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// Rows ahead of the ego reference point.
    pub ego_row: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            height: 32,
            width: 32,
            resolution: 1.0,
            ego_row: 24,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.ego_row > self.height {
            return Err(DapError::Config(
                "BEV grid needs positive size and ego_row ≤ height".into(),
            ));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(DapError::Config("BEV resolution must be positive".into()));
        }
        Ok(())
    }

    /// Ego-frame `(forward, left)` coordinates of the center of cell `(r, c)`.
    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            (self.ego_row as f64 - r as f64 - 0.5) * self.resolution,
            ((self.width / 2) as f64 - c as f64 - 0.5) * self.resolution,
        )
    }

    /// Largest distance from the ego to any cell center.
    pub fn radius(&self) -> f64 {
        let corners = [
            (0, 0),
            (0, self.width - 1),
            (self.height - 1, 0),
            (self.height - 1, self.width - 1),
        ];
        corners
            .iter()
            .map(|&(r, c)| {
                let (x, y) = self.cell_center(r, c);
                x.hypot(y)
            })
            .fold(0.0, f64::max)
    }
}

/// Rasterizes the scene at time `t` around `ego`.
pub fn rasterize_bev(scene: &Scene, ego: &EgoState, t: f64, cfg: &BevConfig) -> BevGrid {
    let mut grid = BevGrid::filled(cfg.height, cfg.width, class::COUNT, class::BACKGROUND);
    let segs = scene.lane.segments_near(
        ego.x,
        ego.y,
        cfg.radius() + scene.road_half_width + cfg.resolution,
    );
    let occupied = scene.occupied(t);
    let me = ego_rect(ego);
    let (sn, cs) = ego.yaw.sin_cos();
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let (u, v) = cfg.cell_center(r, c);
            let (x, y) = (ego.x + u * cs - v * sn, ego.y + u * sn + v * cs);
            let value = if occupied.iter().any(|o| o.contains(x, y)) {
                class::OBSTACLE
            } else if me.contains(x, y) {
                class::EGO
            } else {
                let d = scene.lane.distance_over(&segs, x, y);
                if d <= CENTER_BAND {
                    class::LANE_CENTER
                } else if d <= scene.road_half_width {
                    class::DRIVABLE
                } else {
                    class::BACKGROUND
                }
            };
            grid.set(r, c, value);
        }
    }
    grid
}

/// Lane likelihood `exp(−d²/2σ²)` of the centerline distance on a square
/// world-aligned window of half-size `half_extent` around `center`.
pub fn lane_likelihood_map(
    scene: &Scene,
    center: (f64, f64),
    half_extent: f64,
    resolution: f64,
    sigma: f64,
) -> Result<LaneLikelihoodMap> {
    if !(sigma > 0.0 && half_extent > 0.0) {
        return Err(DapError::Config(
            "lane map needs positive sigma and extent".into(),
        ));
    }
    let n = (2.0 * half_extent / resolution).ceil() as usize + 1;
    let origin = (center.0 - half_extent, center.1 - half_extent);
    let segs = scene.lane.segments_near(
        center.0,
        center.1,
        half_extent * std::f64::consts::SQRT_2 + 6.0 * sigma,
    );
    LaneLikelihoodMap::from_fn(n, n, resolution, origin, |x, y| {
        let d = scene.lane.distance_over(&segs, x, y);
        (-d * d / (2.0 * sigma * sigma)).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::wrap_angle_unchecked;
    use crate::simworld::geometry::Rect;
    use crate::simworld::scene::{build_scene, Difficulty};
    use std::f64::consts::PI;

    #[test]
    fn empty_scene_classes() {
        let s = build_scene(4, Difficulty::Straight);
        let g = rasterize_bev(
            &s,
            &EgoState::new(30.0, 0.0, 0.0),
            0.0,
            &BevConfig::default(),
        );
        g.validate().unwrap();
        assert!(!g.cells.contains(&class::OBSTACLE));
        for k in [class::BACKGROUND, class::DRIVABLE, class::EGO] {
            assert!(g.cells.contains(&k));
        }
    }

    #[test]
    fn obstacle_block_matches_oracle() {
        let mut s = build_scene(4, Difficulty::Straight);
        let ego = EgoState::new(30.0, 0.0, 0.4);
        let cfg = BevConfig::default();
        let (fx, fy) = (10.0, -3.0);
        let (sn, cs) = ego.yaw.sin_cos();
        s.obstacles.push(Rect {
            cx: ego.x + fx * cs - fy * sn,
            cy: ego.y + fx * sn + fy * cs,
            yaw: ego.yaw,
            half_len: 2.0,
            half_wid: 1.2,
        });
        let g = rasterize_bev(&s, &ego, 0.0, &cfg);
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let (u, v) = cfg.cell_center(r, c);
                let inside = (u - fx).abs() <= 2.0 - 1e-9 && (v - fy).abs() <= 1.2 - 1e-9;
                let outside = (u - fx).abs() >= 2.0 + 1e-9 || (v - fy).abs() >= 1.2 + 1e-9;
                if inside {
                    assert_eq!(g.get(r, c), class::OBSTACLE, "({r},{c})");
                } else if outside {
                    assert_ne!(g.get(r, c), class::OBSTACLE, "({r},{c})");
                }
            }
        }
        // Rows 12..=15 and columns 18..=19 hold the 4 × 2 cell block.
        let count = g.cells.iter().filter(|&&k| k == class::OBSTACLE).count();
        assert_eq!(count, 8);
        assert_eq!(g.get(cfg.ego_row - 11, 18), class::OBSTACLE);
    }

    #[test]
    fn full_turn_reproduces_grid() {
        let s = build_scene(8, Difficulty::Hard);
        let cfg = BevConfig::default();
        for k in 0..10 {
            let p = s.lane.lift(20.0 + 10.0 * k as f64, 0.3);
            let a = rasterize_bev(&s, &p, 1.0, &cfg);
            let turned = EgoState {
                yaw: wrap_angle_unchecked(p.yaw + 2.0 * PI),
                ..p
            };
            assert_eq!(a, rasterize_bev(&s, &turned, 1.0, &cfg));
        }
    }

    #[test]
    fn culled_lane_distance_is_exact_where_it_matters() {
        let s = build_scene(12, Difficulty::Hard);
        let cfg = BevConfig::default();
        let ego = s.lane.lift(60.0, 0.0);
        let g = rasterize_bev(&s, &ego, 0.0, &cfg);
        let (sn, cs) = ego.yaw.sin_cos();
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let k = g.get(r, c);
                if k == class::OBSTACLE || k == class::EGO {
                    continue;
                }
                let (u, v) = cfg.cell_center(r, c);
                let d = s
                    .lane
                    .distance(ego.x + u * cs - v * sn, ego.y + u * sn + v * cs);
                let want = if d <= CENTER_BAND {
                    class::LANE_CENTER
                } else if d <= ROAD {
                    class::DRIVABLE
                } else {
                    class::BACKGROUND
                };
                assert_eq!(k, want);
            }
        }
    }
    const ROAD: f64 = crate::simworld::scene::ROAD_HALF_WIDTH;

    #[test]
    fn lane_map_peaks_on_centerline() {
        let s = build_scene(12, Difficulty::Medium);
        let p = s.lane.lift(50.0, 0.0);
        let m = lane_likelihood_map(&s, (p.x, p.y), 10.0, 0.25, 0.5).unwrap();
        let (r, c) = m.to_cell(p.x, p.y);
        assert!(m.sample(r, c) > 0.9);
        let q = s.lane.lift(50.0, 2.0);
        let (r, c) = m.to_cell(q.x, q.y);
        assert!((m.sample(r, c) - (-8.0f64).exp()).abs() < 0.01);
    }
}
