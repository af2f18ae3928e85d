//! Procedural road scenes: a constant-curvature-piece lane, parked
//! obstacles beside it and lead vehicles travelling along it.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};
use crate::kinematics::{wrap_angle_unchecked, EgoState};

use super::geometry::{point_segment_distance, rect_distance, Rect};

/// Centerline sample spacing.
pub const LANE_SPACING: f64 = 0.5;
pub const LANE_HALF_WIDTH: f64 = 1.75;
/// Half-width of the drivable corridor (lane plus shoulder).
pub const ROAD_HALF_WIDTH: f64 = 3.0;
pub const ROUTE_LENGTH: f64 = 160.0;
pub const EGO_HALF_LEN: f64 = 2.25;
pub const EGO_HALF_WID: f64 = 0.95;
/// Arc length of the ego spawn point.
pub const SPAWN_S: f64 = 5.0;
/// Heading bound that keeps the centerline x-monotone, hence simple.
pub const MAX_HEADING: f64 = 1.2;
/// Minimum distance between the spawn footprint and any obstacle.
pub const SPAWN_CLEARANCE: f64 = 5.0;

pub const N_COMMANDS: usize = 4;
pub mod command {
    pub const FOLLOW: usize = 0;
    pub const TURN_LEFT: usize = 1;
    pub const TURN_RIGHT: usize = 2;
    pub const STOP: usize = 3;
    pub const NAMES: [&str; 4] = ["follow", "turn-left", "turn-right", "stop"];
}

/// Heading change over the look-ahead span that makes a turn command.
const TURN_THRESHOLD: f64 = 0.35;
const COMMAND_SPAN: f64 = 70.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Straight,
    Easy,
    Medium,
    Hard,
}

struct DifficultyParams {
    kappa_max: f64,
    obstacles: (usize, usize),
    agents: (usize, usize),
    p_stopped: f64,
    lateral_jitter: f64,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Straight,
        Difficulty::Easy,
        Difficulty::Medium,
        Difficulty::Hard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Straight => "straight",
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| DapError::Config(format!("unknown difficulty '{name}'")))
    }

    /// Mixed-difficulty draw used for datasets and evaluation sets.
    pub fn sample(seed: u64) -> Self {
        let u: f64 = ChaCha8Rng::seed_from_u64(seed ^ 0x4449_4646).gen();
        match u {
            u if u < 0.1 => Difficulty::Straight,
            u if u < 0.4 => Difficulty::Easy,
            u if u < 0.7 => Difficulty::Medium,
            _ => Difficulty::Hard,
        }
    }

    fn params(self) -> DifficultyParams {
        match self {
            Difficulty::Straight => DifficultyParams {
                kappa_max: 0.0,
                obstacles: (0, 0),
                agents: (0, 0),
                p_stopped: 0.0,
                lateral_jitter: 0.0,
            },
            Difficulty::Easy => DifficultyParams {
                kappa_max: 0.02,
                obstacles: (0, 2),
                agents: (0, 1),
                p_stopped: 0.2,
                lateral_jitter: 0.2,
            },
            Difficulty::Medium => DifficultyParams {
                kappa_max: 0.04,
                obstacles: (1, 3),
                agents: (0, 1),
                p_stopped: 0.3,
                lateral_jitter: 0.3,
            },
            Difficulty::Hard => DifficultyParams {
                kappa_max: 0.06,
                obstacles: (2, 4),
                agents: (1, 1),
                p_stopped: 0.4,
                lateral_jitter: 0.3,
            },
        }
    }
}

/// Lane centerline sampled every [`LANE_SPACING`] metres of arc length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub points: Vec<(f64, f64)>,
    pub headings: Vec<f64>,
}

/// Nearest-point query result; `l` is positive to the left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaneProjection {
    pub s: f64,
    pub l: f64,
    pub distance: f64,
    pub heading: f64,
}

impl Lane {
    /// Integrates piecewise-constant curvature `(kappa, length)` pieces from
    /// the origin with heading zero.
    pub fn from_pieces(pieces: &[(f64, f64)]) -> Self {
        let mut points = vec![(0.0, 0.0)];
        let mut headings = vec![0.0];
        let (mut x, mut y, mut psi) = (0.0, 0.0, 0.0);
        for &(kappa, len) in pieces {
            let n = (len / LANE_SPACING).round() as usize;
            for _ in 0..n {
                let d = kappa * LANE_SPACING;
                let mid = psi + 0.5 * d;
                x += LANE_SPACING * mid.cos();
                y += LANE_SPACING * mid.sin();
                psi += d;
                points.push((x, y));
                headings.push(psi);
            }
        }
        Lane { points, headings }
    }

    pub fn length(&self) -> f64 {
        (self.points.len() - 1) as f64 * LANE_SPACING
    }

    /// Pose at arc length `s`, extended linearly past either end.
    pub fn pose_at(&self, s: f64) -> EgoState {
        let n = self.points.len();
        let (i, t) = if s <= 0.0 {
            (0, s / LANE_SPACING)
        } else if s >= self.length() {
            (n - 2, 1.0 + (s - self.length()) / LANE_SPACING)
        } else {
            let f = s / LANE_SPACING;
            let i = (f.floor() as usize).min(n - 2);
            (i, f - i as f64)
        };
        let (a, b) = (self.points[i], self.points[i + 1]);
        let yaw = if s <= 0.0 {
            self.headings[0]
        } else if s >= self.length() {
            self.headings[n - 1]
        } else {
            self.headings[i] + t * (self.headings[i + 1] - self.headings[i])
        };
        EgoState::new(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), yaw)
    }

    /// Point at arc length `s` offset laterally by `l`.
    pub fn lift(&self, s: f64, l: f64) -> EgoState {
        let p = self.pose_at(s);
        let (sn, cs) = p.yaw.sin_cos();
        EgoState::new(p.x - l * sn, p.y + l * cs, p.yaw)
    }

    fn segment_projection(&self, i: usize, x: f64, y: f64) -> (f64, f64, f64) {
        let (a, b) = (self.points[i], self.points[i + 1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let t = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (a.0 + t * dx, a.1 + t * dy);
        let cross = dx * (y - a.1) - dy * (x - a.0);
        ((x - px).hypot(y - py), t, cross)
    }

    /// Nearest point on the polyline; ties go to the earliest segment.
    pub fn project(&self, x: f64, y: f64) -> LaneProjection {
        let mut best = (f64::INFINITY, 0, 0.0, 0.0);
        for i in 0..self.points.len() - 1 {
            let (d, t, cross) = self.segment_projection(i, x, y);
            if d < best.0 {
                best = (d, i, t, cross);
            }
        }
        let (d, i, t, cross) = best;
        LaneProjection {
            s: (i as f64 + t) * LANE_SPACING,
            l: if cross >= 0.0 { d } else { -d },
            distance: d,
            heading: self.headings[i] + t * (self.headings[i + 1] - self.headings[i]),
        }
    }

    /// Point-to-polyline distance.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        self.project(x, y).distance
    }

    /// Indices of segments that come within `radius` of `(x, y)`.
    pub fn segments_near(&self, x: f64, y: f64, radius: f64) -> Vec<usize> {
        (0..self.points.len() - 1)
            .filter(|&i| {
                point_segment_distance((x, y), self.points[i], self.points[i + 1]) <= radius
            })
            .collect()
    }

    /// Distance to the subset `segments`, or infinity when empty.
    pub fn distance_over(&self, segments: &[usize], x: f64, y: f64) -> f64 {
        segments
            .iter()
            .map(|&i| point_segment_distance((x, y), self.points[i], self.points[i + 1]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Vehicle travelling along the lane at constant speed and lateral offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub s0: f64,
    pub l: f64,
    pub speed: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub lane: Lane,
    pub lane_half_width: f64,
    pub road_half_width: f64,
    pub obstacles: Vec<Rect>,
    pub agents: Vec<Agent>,
    pub route_length: f64,
    pub cruise_speed: f64,
    pub start: EgoState,
    pub start_speed: f64,
    pub command: usize,
}

pub fn ego_rect(pose: &EgoState) -> Rect {
    Rect {
        cx: pose.x,
        cy: pose.y,
        yaw: pose.yaw,
        half_len: EGO_HALF_LEN,
        half_wid: EGO_HALF_WID,
    }
}

impl Scene {
    pub fn agent_s(&self, agent: &Agent, t: f64) -> f64 {
        agent.s0 + agent.speed * t
    }

    pub fn agent_rect(&self, agent: &Agent, t: f64) -> Rect {
        let p = self.lane.lift(self.agent_s(agent, t), agent.l);
        Rect {
            cx: p.x,
            cy: p.y,
            yaw: p.yaw,
            half_len: agent.half_len,
            half_wid: agent.half_wid,
        }
    }

    /// Obstacle and agent footprints at time `t`.
    pub fn occupied(&self, t: f64) -> Vec<Rect> {
        self.obstacles
            .iter()
            .copied()
            .chain(self.agents.iter().map(|a| self.agent_rect(a, t)))
            .collect()
    }

    /// Whether a pose keeps the whole ego footprint inside the corridor.
    pub fn in_corridor(&self, pose: &EgoState) -> bool {
        ego_rect(pose)
            .corners()
            .iter()
            .all(|&(x, y)| self.lane.distance(x, y) <= self.road_half_width)
    }

    /// Minimum distance from the spawn footprint to any obstacle or agent.
    pub fn spawn_clearance(&self) -> f64 {
        let ego = ego_rect(&self.start);
        self.occupied(0.0)
            .iter()
            .map(|r| rect_distance(&ego, r))
            .fold(f64::INFINITY, f64::min)
    }
}

fn command_for(lane: &Lane, agents: &[Agent]) -> usize {
    if agents
        .iter()
        .any(|a| a.speed == 0.0 && a.l.abs() < LANE_HALF_WIDTH)
    {
        return command::STOP;
    }
    let turn = lane.pose_at(SPAWN_S + COMMAND_SPAN).yaw - lane.pose_at(SPAWN_S).yaw;
    if turn > TURN_THRESHOLD {
        command::TURN_LEFT
    } else if turn < -TURN_THRESHOLD {
        command::TURN_RIGHT
    } else {
        command::FOLLOW
    }
}

/// Deterministic scene for `seed`.
pub fn build_scene(seed: u64, difficulty: Difficulty) -> Scene {
    let p = difficulty.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pieces = vec![(0.0, 15.0)];
    let mut psi = 0.0f64;
    let mut total = 15.0;
    while total < ROUTE_LENGTH {
        let len = rng
            .gen_range(20.0..45.0f64)
            .min(ROUTE_LENGTH - total)
            .max(LANE_SPACING);
        let len = (len / LANE_SPACING).round() * LANE_SPACING;
        let mut kappa = if p.kappa_max > 0.0 {
            rng.gen_range(-p.kappa_max..=p.kappa_max)
        } else {
            0.0
        };
        let end = psi + kappa * len;
        if end.abs() > MAX_HEADING {
            kappa = (end.signum() * MAX_HEADING - psi) / len;
        }
        psi += kappa * len;
        total += len;
        pieces.push((kappa, len));
    }
    let lane = Lane::from_pieces(&pieces);
    debug_assert!(lane.headings.iter().all(|h| h.abs() < FRAC_PI_2));

    let l0 = if p.lateral_jitter > 0.0 {
        rng.gen_range(-p.lateral_jitter..=p.lateral_jitter)
    } else {
        0.0
    };
    let yaw_err = if p.lateral_jitter > 0.0 {
        rng.gen_range(-0.05..=0.05)
    } else {
        0.0
    };
    let base = lane.lift(SPAWN_S, l0);
    let start = EgoState::new(base.x, base.y, wrap_angle_unchecked(base.yaw + yaw_err));
    let start_speed = rng.gen_range(4.0..7.0);
    let cruise_speed = rng.gen_range(6.0..9.0);

    let mut obstacles = Vec::new();
    let n_obs = rng.gen_range(p.obstacles.0..=p.obstacles.1);
    for _ in 0..n_obs {
        let s = rng.gen_range(25.0..ROUTE_LENGTH - 10.0);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let half_len = rng.gen_range(1.5..2.5);
        let half_wid = rng.gen_range(0.8..1.0);
        let intrusion = rng.gen_range(0.0..0.8);
        let l = side * (ROAD_HALF_WIDTH - intrusion + half_wid);
        let c = lane.lift(s, l);
        obstacles.push(Rect {
            cx: c.x,
            cy: c.y,
            yaw: c.yaw + rng.gen_range(-0.1..0.1),
            half_len,
            half_wid,
        });
    }

    let mut agents = Vec::new();
    let n_agents = rng.gen_range(p.agents.0..=p.agents.1);
    for _ in 0..n_agents {
        let stopped = rng.gen_bool(p.p_stopped);
        agents.push(Agent {
            s0: rng.gen_range(40.0..70.0),
            l: 0.0,
            speed: if stopped {
                0.0
            } else {
                rng.gen_range(2.0..5.0)
            },
            half_len: 2.25,
            half_wid: 0.95,
        });
    }

    let command = command_for(&lane, &agents);
    Scene {
        seed,
        difficulty,
        lane,
        lane_half_width: LANE_HALF_WIDTH,
        road_half_width: ROAD_HALF_WIDTH,
        obstacles,
        agents,
        route_length: ROUTE_LENGTH,
        cruise_speed,
        start,
        start_speed,
        command,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::sub_seed;

    #[test]
    fn deterministic_per_seed() {
        for d in Difficulty::ALL {
            assert_eq!(build_scene(7, d), build_scene(7, d));
        }
        assert_ne!(
            build_scene(7, Difficulty::Hard),
            build_scene(8, Difficulty::Hard)
        );
    }

    #[test]
    fn straight_scene_is_empty_and_straight() {
        let s = build_scene(3, Difficulty::Straight);
        assert!(s.obstacles.is_empty() && s.agents.is_empty());
        assert!(s.lane.headings.iter().all(|&h| h == 0.0));
        assert!(s.lane.points.iter().all(|p| p.1 == 0.0));
        assert_eq!(s.command, command::FOLLOW);
    }

    #[test]
    fn arc_pieces_match_circle() {
        let lane = Lane::from_pieces(&[(0.05, 20.0)]);
        let r = LANE_SPACING / (2.0 * (0.5 * 0.05 * LANE_SPACING).sin());
        for &(x, y) in &lane.points {
            assert!((x.hypot(y - r) - r).abs() < 1e-9);
        }
        assert!((lane.length() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn projection_round_trip() {
        let s = build_scene(11, Difficulty::Hard);
        for k in 0..50 {
            let (arc, l) = (10.0 + 2.7 * k as f64, -2.0 + 0.08 * k as f64);
            let p = s.lane.lift(arc, l);
            let q = s.lane.project(p.x, p.y);
            assert!(
                (q.s - arc).abs() < 0.05 && (q.l - l).abs() < 1e-3,
                "{arc} {l} {q:?}"
            );
        }
    }

    #[test]
    fn spawn_clearance_audit() {
        for i in 0..1000u64 {
            let seed = sub_seed(99, &format!("audit/{i}"));
            let s = build_scene(seed, Difficulty::sample(seed));
            assert!(s.spawn_clearance() >= SPAWN_CLEARANCE, "seed {seed}");
            assert!(s
                .lane
                .headings
                .iter()
                .all(|h| h.abs() <= MAX_HEADING + 1e-9));
            assert!(
                s.lane.points.windows(2).all(|w| w[1].0 > w[0].0),
                "x-monotone"
            );
            assert!(s.command < N_COMMANDS);
            assert!(s.in_corridor(&s.start));
        }
    }
}
