//! Closed-loop execution of driving policies, PDMS-style subscores and
//! open-loop displacement metrics.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bevq::BevGrid;
use crate::error::{DapError, Result};
use crate::kinematics::{finite_diff_rates, wrap_angle_unchecked, EgoState, KaPoint};
use crate::rl::reward_total;
use crate::tokenize::{ka_detokenize, ka_points_to_tokens, token_to_ka, KaGridConfig, TrajTokenId};

use super::episode::{Episode, SimConfig};
use super::expert::expert_policy;
use super::raster::rasterize_bev;
use super::scene::Scene;
use super::sim::{frame_reward, step, time_to_collision};

pub const TTC_THRESHOLD: f64 = 2.0;
/// Comfort bound on the per-step acceleration change, m/s².
pub const COMFORT_DELTA_A: f64 = 0.6;
/// Comfort bound on angular acceleration, rad/s².
pub const COMFORT_ALPHA: f64 = 0.4;
/// Expert progress below which any progress counts as complete.
pub const MIN_EXPERT_PROGRESS: f64 = 1.0;

/// `NC·DAC·(5·EP + 5·TTC + 2·C)/12`.
pub fn pdms(nc: f64, dac: f64, ttc: f64, c: f64, ep: f64) -> Result<f64> {
    for (name, v) in [("NC", nc), ("DAC", dac), ("TTC", ttc), ("C", c), ("EP", ep)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(DapError::Domain(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(nc * dac * (5.0 * ep + 5.0 * ttc + 2.0 * c) / 12.0)
}

/// What a policy sees at each closed-loop step; histories end at the current frame.
pub struct Observation<'a> {
    pub scene: &'a Scene,
    pub t: f64,
    pub dt: f64,
    pub poses: &'a [EgoState],
    pub speeds: &'a [f64],
    /// Tokens of the executed actions between consecutive history frames.
    pub tokens: &'a [TrajTokenId],
    /// Empty when the policy does not request BEV frames.
    pub bev: &'a [BevGrid],
}

impl Observation<'_> {
    pub fn pose(&self) -> EgoState {
        *self.poses.last().unwrap()
    }
    pub fn speed(&self) -> f64 {
        *self.speeds.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyOutput {
    /// Raw trajectory-token index; indices outside the codebook are flagged.
    Token(u32),
    Continuous(KaPoint),
}

pub trait DrivingPolicy {
    fn act(&mut self, obs: &Observation) -> Result<PolicyOutput>;
    fn needs_bev(&self) -> bool {
        true
    }
}

/// The demonstration driver as a policy.
pub struct ExpertDriver {
    pub cfg: SimConfig,
    pub grid: KaGridConfig,
}

impl DrivingPolicy for ExpertDriver {
    fn act(&mut self, obs: &Observation) -> Result<PolicyOutput> {
        let a = expert_policy(
            obs.scene,
            &obs.pose(),
            obs.speed(),
            obs.t,
            &self.cfg.expert,
            &self.grid,
        )
        .ka;
        Ok(PolicyOutput::Token(
            ka_points_to_tokens(&[a], &self.grid)?.0[0].0,
        ))
    }
    fn needs_bev(&self) -> bool {
        false
    }
}

/// Brakes to a standstill within one step and stays there.
pub struct StopDriver;

impl DrivingPolicy for StopDriver {
    fn act(&mut self, obs: &Observation) -> Result<PolicyOutput> {
        Ok(PolicyOutput::Continuous(KaPoint::new(
            0.0,
            -obs.speed() / obs.dt,
        )))
    }
    fn needs_bev(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedLoopConfig {
    /// Expert frames driven before the policy takes over.
    pub warmup: usize,
    /// Policy steps per scene.
    pub horizon: usize,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig {
            warmup: 3,
            horizon: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub kappa: f64,
    pub accel: f64,
    pub reward: f64,
    pub d_ctr: f64,
    pub d_clr: f64,
    pub ttc: f64,
    pub collision: bool,
    pub offroad: bool,
    pub comfortable: bool,
    pub invalid_token: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub seed: u64,
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub c: f64,
    pub ep: f64,
    pub pdms: f64,
    pub mean_reward: f64,
    pub collisions: usize,
    pub invalid_tokens: usize,
    pub progress: f64,
    pub expert_progress: f64,
    pub trace: Vec<StepTrace>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenes: usize,
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub c: f64,
    pub ep: f64,
    pub pdms: f64,
    pub mean_reward: f64,
    pub collisions: usize,
    pub invalid_tokens: usize,
}

/// Scene means of every subscore.
pub fn aggregate(results: &[ClosedLoopResult]) -> Aggregate {
    let n = results.len();
    if n == 0 {
        return Aggregate::default();
    }
    let mean = |f: fn(&ClosedLoopResult) -> f64| results.iter().map(f).sum::<f64>() / n as f64;
    Aggregate {
        scenes: n,
        nc: mean(|r| r.nc),
        dac: mean(|r| r.dac),
        ttc: mean(|r| r.ttc),
        c: mean(|r| r.c),
        ep: mean(|r| r.ep),
        pdms: mean(|r| r.pdms),
        mean_reward: mean(|r| r.mean_reward),
        collisions: results.iter().map(|r| r.collisions).sum(),
        invalid_tokens: results.iter().map(|r| r.invalid_tokens).sum(),
    }
}

struct Rollout {
    trace: Vec<StepTrace>,
    progress: f64,
}

fn run_policy(
    scene: &Scene,
    policy: &mut dyn DrivingPolicy,
    cfg: &SimConfig,
    grid: &KaGridConfig,
    cl: &ClosedLoopConfig,
) -> Result<Rollout> {
    let dt = cfg.episode.dt;
    let want_bev = policy.needs_bev();
    let mut poses = vec![scene.start];
    let mut speeds = vec![scene.start_speed];
    let mut tokens: Vec<TrajTokenId> = Vec::new();
    let mut bev = Vec::new();
    if want_bev {
        bev.push(rasterize_bev(scene, &scene.start, 0.0, &cfg.bev));
    }
    let mut kappas = Vec::new();
    for i in 0..cl.warmup {
        let t = i as f64 * dt;
        let (p, v) = (poses[i], speeds[i]);
        let a = expert_policy(scene, &p, v, t, &cfg.expert, grid).ka;
        let (q, vn, _) = step(scene, p, v, a, dt, t)?;
        tokens.push(ka_points_to_tokens(&[a], grid)?.0[0]);
        kappas.push(a.kappa);
        poses.push(q);
        speeds.push(vn);
        if want_bev {
            bev.push(rasterize_bev(scene, &q, t + dt, &cfg.bev));
        }
    }
    let s0 = scene.lane.project(poses[cl.warmup].x, poses[cl.warmup].y).s;
    let mut trace = Vec::with_capacity(cl.horizon);
    for k in 0..cl.horizon {
        let i = cl.warmup + k;
        let t = i as f64 * dt;
        let obs = Observation {
            scene,
            t,
            dt,
            poses: &poses,
            speeds: &speeds,
            tokens: &tokens,
            bev: &bev,
        };
        let out = policy.act(&obs)?;
        let (pose, v) = (poses[i], speeds[i]);
        let (action, invalid) = match out {
            PolicyOutput::Token(raw) => match token_to_ka(TrajTokenId(raw), grid) {
                Ok(a) => (Some(a), false),
                Err(_) => (None, true),
            },
            PolicyOutput::Continuous(a) if a.kappa.is_finite() && a.a.is_finite() => {
                (Some(a), false)
            }
            PolicyOutput::Continuous(_) => (None, true),
        };
        let (next, vn, flags, exec) = match action {
            Some(a) => {
                let (q, vn, f) = step(scene, pose, v, a, dt, t)?;
                (q, vn, f, a)
            }
            None => {
                let (q, vn, f) = step(scene, pose, 0.0, KaPoint::default(), dt, t)?;
                (q, vn, f, KaPoint::new(0.0, -v / dt))
            }
        };
        tokens.push(ka_points_to_tokens(&[exec], grid)?.0[0]);
        kappas.push(exec.kappa);
        poses.push(next);
        speeds.push(vn);
        if want_bev {
            bev.push(rasterize_bev(scene, &next, t + dt, &cfg.bev));
        }
        let (rc, d) = frame_reward(scene, &poses, i + 1, 0.0, dt, &cfg.reward)?;
        let rates = finite_diff_rates(&poses[i - 2..=i + 1], dt)?;
        let last = rates.last().unwrap();
        let comfortable =
            last.delta_a.abs() <= COMFORT_DELTA_A && last.alpha.abs() <= COMFORT_ALPHA;
        trace.push(StepTrace {
            step: k,
            x: next.x,
            y: next.y,
            yaw: next.yaw,
            v: vn,
            kappa: exec.kappa,
            accel: exec.a,
            reward: reward_total(&rc, &cfg.reward),
            d_ctr: d.d_ctr,
            d_clr: d.d_clr,
            ttc: time_to_collision(scene, next, vn, exec.kappa, t + dt),
            collision: flags.collision,
            offroad: flags.offroad,
            comfortable,
            invalid_token: invalid,
        });
        if flags.collision {
            break;
        }
    }
    let last = poses.last().unwrap();
    let progress = scene.lane.project(last.x, last.y).s - s0;
    Ok(Rollout { trace, progress })
}

/// Runs `policy` on one scene and scores it against the expert's progress.
pub fn closed_loop_scene(
    scene: &Scene,
    policy: &mut dyn DrivingPolicy,
    cfg: &SimConfig,
    grid: &KaGridConfig,
    cl: &ClosedLoopConfig,
) -> Result<ClosedLoopResult> {
    if cl.warmup < 2 || cl.horizon == 0 {
        return Err(DapError::Config(
            "closed loop needs warmup ≥ 2 and a positive horizon".into(),
        ));
    }
    let ro = run_policy(scene, policy, cfg, grid, cl)?;
    let reference = run_policy(
        scene,
        &mut ExpertDriver {
            cfg: cfg.clone(),
            grid: *grid,
        },
        cfg,
        grid,
        cl,
    )?;
    let n = ro.trace.len() as f64;
    let collided = ro.trace.iter().any(|s| s.collision);
    let nc = if collided { 0.0 } else { 1.0 };
    let dac = ro.trace.iter().filter(|s| !s.offroad).count() as f64 / n;
    let c = ro.trace.iter().filter(|s| s.comfortable).count() as f64 / n;
    let min_ttc = ro.trace.iter().map(|s| s.ttc).fold(f64::INFINITY, f64::min);
    let ttc = if min_ttc > TTC_THRESHOLD {
        1.0
    } else {
        (min_ttc / TTC_THRESHOLD).clamp(0.0, 1.0)
    };
    let ep = if reference.progress < MIN_EXPERT_PROGRESS {
        1.0
    } else {
        (ro.progress / reference.progress).clamp(0.0, 1.0)
    };
    Ok(ClosedLoopResult {
        seed: scene.seed,
        nc,
        dac,
        ttc,
        c,
        ep,
        pdms: pdms(nc, dac, ttc, c, ep)?,
        mean_reward: ro.trace.iter().map(|s| s.reward).sum::<f64>() / n,
        collisions: collided as usize,
        invalid_tokens: ro.trace.iter().filter(|s| s.invalid_token).count(),
        progress: ro.progress,
        expert_progress: reference.progress,
        trace: ro.trace,
    })
}

/// Evaluates a fresh policy from `make` on every scene, in parallel,
/// returning results in scene order.
pub fn closed_loop_eval<F>(
    make: F,
    scenes: &[Scene],
    cfg: &SimConfig,
    grid: &KaGridConfig,
    cl: &ClosedLoopConfig,
) -> Result<(Vec<ClosedLoopResult>, Aggregate)>
where
    F: Fn(&Scene) -> Result<Box<dyn DrivingPolicy + Send>> + Sync,
{
    let results = scenes
        .par_iter()
        .map(|s| {
            let mut p = make(s)?;
            closed_loop_scene(s, p.as_mut(), cfg, grid, cl)
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&results);
    Ok((results, agg))
}

pub const CLOSED_LOOP_CSV_HEADER: &str = "seed,NC,DAC,TTC,C,EP,PDMS_style,mean_reward,collisions,invalid_tokens,progress,expert_progress";

pub fn write_closed_loop_csv<W: Write>(
    out: &mut W,
    results: &[ClosedLoopResult],
    agg: &Aggregate,
) -> std::io::Result<()> {
    writeln!(out, "{CLOSED_LOOP_CSV_HEADER}")?;
    for r in results {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.4},{:.4}",
            r.seed,
            r.nc,
            r.dac,
            r.ttc,
            r.c,
            r.ep,
            r.pdms,
            r.mean_reward,
            r.collisions,
            r.invalid_tokens,
            r.progress,
            r.expert_progress
        )?;
    }
    writeln!(
        out,
        "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},,",
        agg.nc,
        agg.dac,
        agg.ttc,
        agg.c,
        agg.ep,
        agg.pdms,
        agg.mean_reward,
        agg.collisions,
        agg.invalid_tokens
    )
}

/// Predicts future trajectory tokens at frame `t0` of an episode.
pub trait OpenLoopPolicy: Sync {
    fn predict(&self, episode: &Episode, t0: usize, steps: usize) -> Result<Vec<TrajTokenId>>;
}

/// Replays the recorded tokens.
pub struct ReplayPolicy;

impl OpenLoopPolicy for ReplayPolicy {
    fn predict(&self, episode: &Episode, t0: usize, steps: usize) -> Result<Vec<TrajTokenId>> {
        Ok(episode.tokens[t0..t0 + steps].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopRow {
    pub horizon_s: f64,
    pub ade: f64,
    pub fde: f64,
    pub ahe: f64,
    pub samples: usize,
}

/// Anchor frames with `history` frames before them and `steps` recorded after.
pub fn open_loop_anchors(len: usize, history: usize, steps: usize, stride: usize) -> Vec<usize> {
    if len < history + steps + 1 {
        return Vec::new();
    }
    (history..len - steps).step_by(stride.max(1)).collect()
}

/// Maps decoded poses `[p_0, …, p_N]` at frame `t0` of an episode to
/// refined poses of the same length.
pub type Refiner<'a> = &'a (dyn Fn(&Episode, usize, &[EgoState]) -> Result<Vec<EgoState>> + Sync);

/// ADE/FDE/AHE at each horizon (seconds), comparing decoded predictions with
/// the recorded continuation from every anchor.
pub fn open_loop_eval(
    policy: &dyn OpenLoopPolicy,
    episodes: &[Episode],
    horizons_s: &[f64],
    history: usize,
    stride: usize,
    grid: &KaGridConfig,
) -> Result<Vec<OpenLoopRow>> {
    Ok(open_loop_eval_refined(policy, episodes, horizons_s, history, stride, grid, None)?.0)
}

/// As [`open_loop_eval`]; with a refiner, also scores the refined poses.
/// The raw rows do not depend on the refiner.
pub fn open_loop_eval_refined(
    policy: &dyn OpenLoopPolicy,
    episodes: &[Episode],
    horizons_s: &[f64],
    history: usize,
    stride: usize,
    grid: &KaGridConfig,
    refine: Option<Refiner>,
) -> Result<(Vec<OpenLoopRow>, Option<Vec<OpenLoopRow>>)> {
    if episodes.is_empty() || horizons_s.is_empty() {
        return Err(DapError::Size(
            "open-loop evaluation needs episodes and horizons".into(),
        ));
    }
    let dt = episodes[0].dt;
    let steps_for = |h: f64| (h / dt).round() as usize;
    let max_steps = horizons_s.iter().map(|&h| steps_for(h)).max().unwrap();
    if horizons_s.iter().any(|&h| steps_for(h) == 0) {
        return Err(DapError::Config(
            "horizons must cover at least one step".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| {
            open_loop_anchors(ep.len(), history, max_steps, stride)
                .into_iter()
                .map(move |t| (e, t))
        })
        .collect();
    if jobs.is_empty() {
        return Err(DapError::Size(format!(
            "no episode has {} frames for a {max_steps}-step horizon",
            history + max_steps + 1
        )));
    }
    type Errs = (Vec<f64>, Vec<f64>);
    let errs = |ep: &Episode, t0: usize, pred: &[EgoState]| -> Errs {
        let pos = (1..=max_steps)
            .map(|k| pred[k].distance(&ep.poses[t0 + k]))
            .collect();
        let head = (1..=max_steps)
            .map(|k| wrap_angle_unchecked(pred[k].yaw - ep.poses[t0 + k].yaw).abs())
            .collect();
        (pos, head)
    };
    let errors: Vec<(Errs, Option<Errs>)> = jobs
        .par_iter()
        .map(|&(e, t0)| {
            let ep = &episodes[e];
            let toks = policy.predict(ep, t0, max_steps)?;
            let pred = ka_detokenize(&toks, ep.poses[t0], ep.speeds[t0], dt, grid)?;
            let refined = match refine {
                Some(f) => {
                    let r = f(ep, t0, &pred)?;
                    if r.len() != pred.len() {
                        return Err(DapError::Internal(format!(
                            "refiner returned {} poses for {}",
                            r.len(),
                            pred.len()
                        )));
                    }
                    Some(errs(ep, t0, &r))
                }
                None => None,
            };
            Ok((errs(ep, t0, &pred), refined))
        })
        .collect::<Result<_>>()?;
    let rows = |sel: &dyn Fn(&(Errs, Option<Errs>)) -> &Errs| -> Vec<OpenLoopRow> {
        let n = errors.len() as f64;
        horizons_s
            .iter()
            .map(|&h| {
                let k = steps_for(h);
                OpenLoopRow {
                    horizon_s: h,
                    ade: errors
                        .iter()
                        .map(|x| sel(x).0[..k].iter().sum::<f64>() / k as f64)
                        .sum::<f64>()
                        / n,
                    fde: errors.iter().map(|x| sel(x).0[k - 1]).sum::<f64>() / n,
                    ahe: errors
                        .iter()
                        .map(|x| sel(x).1[..k].iter().sum::<f64>() / k as f64)
                        .sum::<f64>()
                        / n,
                    samples: errors.len(),
                }
            })
            .collect()
    };
    let raw = rows(&|x| &x.0);
    let refined = refine.map(|_| rows(&|x| x.1.as_ref().unwrap()));
    Ok((raw, refined))
}

pub const OPEN_LOOP_CSV_HEADER: &str = "horizon_s,ADE,FDE,AHE,samples";

pub fn write_open_loop_csv<W: Write>(out: &mut W, rows: &[OpenLoopRow]) -> std::io::Result<()> {
    writeln!(out, "{OPEN_LOOP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{}",
            r.horizon_s, r.ade, r.fde, r.ahe, r.samples
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::episode::{episode_seed, rollout_episode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> KaGridConfig {
        KaGridConfig::fb_ka_a()
    }

    fn scenes(n: usize, root: u64) -> Vec<Scene> {
        let cfg = SimConfig::default();
        (0..n).map(|i| cfg.scene(episode_seed(root, i))).collect()
    }

    #[test]
    fn pdms_examples() {
        assert_eq!(pdms(1.0, 1.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        let human = pdms(1.0, 1.0, 1.0, 0.999, 0.875).unwrap();
        assert!((human - 0.94775).abs() < 1e-12, "{human}");
        assert_eq!(pdms(0.0, 1.0, 0.3, 0.7, 0.9).unwrap(), 0.0);
        assert!(matches!(
            pdms(1.1, 1.0, 1.0, 1.0, 1.0),
            Err(DapError::Domain(_))
        ));
        assert!(matches!(
            pdms(1.0, 1.0, 1.0, f64::NAN, 1.0),
            Err(DapError::Domain(_))
        ));
    }

    proptest! {
        #[test]
        fn pdms_is_gated_and_affine(nc in 0.0..=1.0f64, dac in 0.0..=1.0f64, ttc in 0.0..=1.0f64, c in 0.0..=1.0f64, ep in 0.0..=1.0f64) {
            let s = pdms(nc, dac, ttc, c, ep).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            let base = pdms(nc, dac, 0.0, 0.0, 0.0).unwrap();
            let lin = base + nc * dac * (5.0 * ep + 5.0 * ttc + 2.0 * c) / 12.0;
            prop_assert!((s - lin).abs() < 1e-12);
            prop_assert!((pdms(1.0, 1.0, ttc, c, ep).unwrap() * nc * dac - s).abs() < 1e-12);
        }
    }

    #[test]
    fn expert_scores_clean() {
        let cfg = SimConfig::default();
        let sc = scenes(40, 3);
        let make = |_: &Scene| -> Result<Box<dyn DrivingPolicy + Send>> {
            Ok(Box::new(ExpertDriver {
                cfg: cfg.clone(),
                grid: grid(),
            }))
        };
        let (res, agg) =
            closed_loop_eval(make, &sc, &cfg, &grid(), &ClosedLoopConfig::default()).unwrap();
        for r in &res {
            assert_eq!((r.nc, r.dac), (1.0, 1.0), "seed {}", r.seed);
            assert!((r.ep - 1.0).abs() < 1e-12);
        }
        assert!(agg.pdms > 0.9, "{agg:?}");
    }

    #[test]
    fn stopping_policy_is_safe_without_progress() {
        let cfg = SimConfig::default();
        let sc: Vec<Scene> = scenes(20, 4)
            .into_iter()
            .filter(|s| s.command != super::super::scene::command::STOP)
            .collect();
        let make =
            |_: &Scene| -> Result<Box<dyn DrivingPolicy + Send>> { Ok(Box::new(StopDriver)) };
        let (res, _) =
            closed_loop_eval(make, &sc, &cfg, &grid(), &ClosedLoopConfig::default()).unwrap();
        for r in &res {
            assert_eq!(r.nc, 1.0);
            assert!(r.ep < 0.1, "{}", r.ep);
        }
    }

    struct RandomTokens(ChaCha8Rng);

    impl DrivingPolicy for RandomTokens {
        fn act(&mut self, _: &Observation) -> Result<PolicyOutput> {
            Ok(PolicyOutput::Token(self.0.gen_range(0..1200)))
        }
        fn needs_bev(&self) -> bool {
            false
        }
    }

    #[test]
    fn random_policies_stay_in_range() {
        let cfg = SimConfig::default();
        let sc = scenes(500, 5);
        let cl = ClosedLoopConfig {
            warmup: 3,
            horizon: 20,
        };
        let make = |s: &Scene| -> Result<Box<dyn DrivingPolicy + Send>> {
            Ok(Box::new(RandomTokens(ChaCha8Rng::seed_from_u64(s.seed))))
        };
        let (res, agg) = closed_loop_eval(make, &sc, &cfg, &grid(), &cl).unwrap();
        let mut flagged = 0;
        for r in &res {
            for v in [r.nc, r.dac, r.ttc, r.c, r.ep, r.pdms] {
                assert!((0.0..=1.0).contains(&v), "{r:?}");
            }
            flagged += r.invalid_tokens;
        }
        assert!(flagged > 0 && agg.invalid_tokens == flagged);
    }

    #[test]
    fn replay_matches_codec_error_and_is_monotone() {
        let cfg = SimConfig::default();
        let eps: Vec<Episode> = scenes(10, 6)
            .iter()
            .map(|s| rollout_episode(s, &cfg, &grid(), 0).unwrap())
            .collect();
        let rows =
            open_loop_eval(&ReplayPolicy, &eps, &[1.0, 2.0, 3.0, 4.0], 3, 2, &grid()).unwrap();
        for r in &rows {
            assert!(r.ade < 1e-9 && r.fde < 1e-9 && r.ahe < 1e-9, "{r:?}");
        }
        struct Straight;
        impl OpenLoopPolicy for Straight {
            fn predict(&self, _: &Episode, _: usize, steps: usize) -> Result<Vec<TrajTokenId>> {
                let g = KaGridConfig::fb_ka_a();
                Ok(vec![
                    ka_points_to_tokens(&[KaPoint::new(0.03, -0.5)], &g)?.0
                        [0];
                    steps
                ])
            }
        }
        let rows = open_loop_eval(&Straight, &eps, &[1.0, 2.0, 3.0, 4.0], 3, 2, &grid()).unwrap();
        assert!(rows.windows(2).all(|w| w[1].ade >= w[0].ade), "{rows:?}");
        assert!(matches!(
            open_loop_eval(&ReplayPolicy, &[], &[1.0], 3, 1, &grid()),
            Err(DapError::Size(_))
        ));
    }
}
