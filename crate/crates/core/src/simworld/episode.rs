//! Expert episodes: rollout with optional DART-style action perturbation,
//! per-frame records and the on-disk dataset layout.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevq::{class, BevGrid};
use crate::error::{DapError, Result};
use crate::kinematics::{EgoState, KaPoint};
use crate::rl::{reward_total, RewardComponents, RewardWeights};
use crate::seeding::sub_seed;
use crate::tokenize::{ka_points_to_tokens, KaGridConfig, TrajTokenId};

use super::expert::{expert_policy, fit_to_grid, ExpertConfig};
use super::raster::{rasterize_bev, BevConfig};
use super::scene::{build_scene, Difficulty, Scene};
use super::sim::{flags_at, frame_reward, step, StepFlags};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub frames: usize,
    pub dt: f64,
    /// Probability per frame of starting a perturbation burst.
    pub perturb_prob: f64,
    /// Longest burst, in frames.
    pub perturb_max_len: usize,
    /// Uniform perturbation half-ranges added to the expert action.
    pub perturb_kappa: f64,
    pub perturb_accel: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            frames: 24,
            dt: 0.5,
            perturb_prob: 0.0,
            perturb_max_len: 2,
            perturb_kappa: 0.03,
            perturb_accel: 0.6,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(DapError::Config("episodes need at least 3 frames".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DapError::Config("dt must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.perturb_prob) || self.perturb_max_len == 0 {
            return Err(DapError::Config(
                "perturb_prob must lie in [0, 1] and bursts last ≥ 1 frame".into(),
            ));
        }
        if !(self.perturb_kappa >= 0.0 && self.perturb_accel >= 0.0) {
            return Err(DapError::Config(
                "perturbation ranges must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Simulator settings shared by data generation and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct SimConfig {
    pub episode: EpisodeConfig,
    pub expert: ExpertConfig,
    pub bev: BevConfig,
    pub reward: RewardWeights,
    /// Fixed difficulty, or a per-seed mixture when absent.
    pub difficulty: Option<Difficulty>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.expert.validate()?;
        self.bev.validate()?;
        self.reward.validate()
    }

    pub fn scene(&self, seed: u64) -> Scene {
        build_scene(
            seed,
            self.difficulty.unwrap_or_else(|| Difficulty::sample(seed)),
        )
    }
}

/// One simulated drive.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene: Scene,
    pub poses: Vec<EgoState>,
    pub speeds: Vec<f64>,
    pub bev: Vec<BevGrid>,
    /// Executed action from frame `t` to `t + 1`.
    pub actions: Vec<KaPoint>,
    pub tokens: Vec<TrajTokenId>,
    /// Unperturbed expert label at frame `t`.
    pub expert_tokens: Vec<TrajTokenId>,
    pub rewards: Vec<RewardComponents>,
    pub d_ctr: Vec<f64>,
    pub d_clr: Vec<f64>,
    pub flags: Vec<StepFlags>,
    pub perturbed: Vec<bool>,
    pub command: usize,
    pub dt: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn reward_totals(&self, w: &RewardWeights) -> Vec<f64> {
        self.rewards.iter().map(|c| reward_total(c, w)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.poses.len();
        let lens = [
            self.speeds.len(),
            self.bev.len(),
            self.actions.len(),
            self.tokens.len(),
            self.expert_tokens.len(),
            self.rewards.len(),
            self.d_ctr.len(),
            self.d_clr.len(),
            self.flags.len(),
            self.perturbed.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(DapError::Validation(format!(
                "episode frame counts disagree: {n} poses vs {lens:?}"
            )));
        }
        if self.command >= super::scene::N_COMMANDS {
            return Err(DapError::Validation(format!(
                "command {} out of range",
                self.command
            )));
        }
        Ok(())
    }
}

fn to_token(ka: KaPoint, grid: &KaGridConfig) -> Result<TrajTokenId> {
    Ok(ka_points_to_tokens(&[ka], grid)?.0[0])
}

/// Rolls the expert through `scene`. Perturbation bursts draw from `seed`;
/// the executed action is the expert's plus uniform noise, refit to the grid.
pub fn rollout_episode(
    scene: &Scene,
    cfg: &SimConfig,
    grid: &KaGridConfig,
    seed: u64,
) -> Result<Episode> {
    let ec = &cfg.episode;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ec.frames;
    let mut ep = Episode {
        scene: scene.clone(),
        poses: Vec::with_capacity(n),
        speeds: Vec::with_capacity(n),
        bev: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        tokens: Vec::with_capacity(n),
        expert_tokens: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        d_ctr: Vec::with_capacity(n),
        d_clr: Vec::with_capacity(n),
        flags: Vec::with_capacity(n),
        perturbed: Vec::with_capacity(n),
        command: scene.command,
        dt: ec.dt,
    };
    let (mut pose, mut v) = (scene.start, scene.start_speed);
    let mut flags = flags_at(scene, &pose, 0.0);
    let mut burst = 0usize;
    let mut noise = KaPoint::default();
    for i in 0..n {
        let t = i as f64 * ec.dt;
        let expert = expert_policy(scene, &pose, v, t, &cfg.expert, grid).ka;
        if burst == 0 && ec.perturb_prob > 0.0 && i > 0 && rng.gen_bool(ec.perturb_prob) {
            burst = rng.gen_range(1..=ec.perturb_max_len);
            noise = KaPoint::new(
                rng.gen_range(-ec.perturb_kappa..=ec.perturb_kappa),
                rng.gen_range(-ec.perturb_accel..=ec.perturb_accel),
            );
        }
        let executed = if burst > 0 {
            burst -= 1;
            fit_to_grid(
                KaPoint::new(expert.kappa + noise.kappa, expert.a + noise.a),
                grid,
                cfg.expert.snap,
            )
        } else {
            expert
        };
        ep.poses.push(pose);
        ep.speeds.push(v);
        ep.bev.push(rasterize_bev(scene, &pose, t, &cfg.bev));
        ep.flags.push(flags);
        ep.perturbed.push(executed != expert);
        ep.actions.push(executed);
        ep.tokens.push(to_token(executed, grid)?);
        ep.expert_tokens.push(to_token(expert, grid)?);
        let (next, vn, f) = step(scene, pose, v, executed, ec.dt, t)?;
        pose = next;
        v = vn;
        flags = f;
    }
    for i in 0..n {
        let (r, d) = frame_reward(scene, &ep.poses, i, 0.0, ec.dt, &cfg.reward)?;
        ep.rewards.push(r);
        ep.d_ctr.push(d.d_ctr);
        ep.d_clr.push(d.d_clr);
    }
    ep.validate()?;
    Ok(ep)
}

/// Unperturbed expert poses and flags over `frames` steps; skips rasterization.
pub fn expert_trace(
    scene: &Scene,
    cfg: &SimConfig,
    grid: &KaGridConfig,
    frames: usize,
) -> Result<(Vec<EgoState>, Vec<StepFlags>)> {
    let (mut pose, mut v) = (scene.start, scene.start_speed);
    let mut poses = vec![pose];
    let mut flags = vec![flags_at(scene, &pose, 0.0)];
    for i in 0..frames {
        let t = i as f64 * cfg.episode.dt;
        let a = expert_policy(scene, &pose, v, t, &cfg.expert, grid).ka;
        let (p, vn, f) = step(scene, pose, v, a, cfg.episode.dt, t)?;
        pose = p;
        v = vn;
        poses.push(p);
        flags.push(f);
    }
    Ok((poses, flags))
}

/// One line of an episode file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub command: usize,
    pub r_ctr: f64,
    pub r_clr: f64,
    pub r_comf: f64,
    pub d_ctr: f64,
    pub d_clr: f64,
    pub kappa: f64,
    pub accel: f64,
    pub token: u32,
    pub expert_token: u32,
    pub perturbed: bool,
    pub collision: bool,
    pub offroad: bool,
    pub bev: String,
}

pub fn episode_records(ep: &Episode) -> Vec<FrameRecord> {
    (0..ep.len())
        .map(|i| FrameRecord {
            index: i,
            x: ep.poses[i].x,
            y: ep.poses[i].y,
            yaw: ep.poses[i].yaw,
            v: ep.speeds[i],
            command: ep.command,
            r_ctr: ep.rewards[i].ctr,
            r_clr: ep.rewards[i].clr,
            r_comf: ep.rewards[i].comf,
            d_ctr: ep.d_ctr[i],
            d_clr: ep.d_clr[i],
            kappa: ep.actions[i].kappa,
            accel: ep.actions[i].a,
            token: ep.tokens[i].0,
            expert_token: ep.expert_tokens[i].0,
            perturbed: ep.perturbed[i],
            collision: ep.flags[i].collision,
            offroad: ep.flags[i].offroad,
            bev: ep.bev[i].to_rle(),
        })
        .collect()
}

pub fn write_episode(path: &Path, ep: &Episode) -> Result<()> {
    let mut buf = Vec::new();
    for r in episode_records(ep) {
        serde_json::to_writer(&mut buf, &r).map_err(|e| DapError::format(path, e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| DapError::io(path, e))
}

/// Reads an episode file and rebuilds the in-memory episode around `scene`.
pub fn read_episode(path: &Path, scene: Scene, bev: &BevConfig, dt: f64) -> Result<Episode> {
    let file = std::fs::File::open(path).map_err(|e| DapError::io(path, e))?;
    let mut recs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DapError::io(path, e))?;
        let r: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| DapError::format(path, format!("line {}: {e}", i + 1)))?;
        if r.index != i {
            return Err(DapError::format(
                path,
                format!("line {} has frame index {}", i + 1, r.index),
            ));
        }
        recs.push(r);
    }
    let command = recs.first().map_or(scene.command, |r| r.command);
    let mut ep = Episode {
        scene,
        poses: Vec::new(),
        speeds: Vec::new(),
        bev: Vec::new(),
        actions: Vec::new(),
        tokens: Vec::new(),
        expert_tokens: Vec::new(),
        rewards: Vec::new(),
        d_ctr: Vec::new(),
        d_clr: Vec::new(),
        flags: Vec::new(),
        perturbed: Vec::new(),
        command,
        dt,
    };
    for r in recs {
        ep.poses.push(EgoState {
            x: r.x,
            y: r.y,
            yaw: r.yaw,
        });
        ep.speeds.push(r.v);
        ep.bev.push(
            BevGrid::from_rle(bev.height, bev.width, class::COUNT, &r.bev)
                .map_err(|e| DapError::format(path, format!("frame {}: {e}", r.index)))?,
        );
        ep.actions.push(KaPoint::new(r.kappa, r.accel));
        ep.tokens.push(TrajTokenId(r.token));
        ep.expert_tokens.push(TrajTokenId(r.expert_token));
        ep.rewards.push(RewardComponents {
            ctr: r.r_ctr,
            clr: r.r_clr,
            comf: r.r_comf,
        });
        ep.d_ctr.push(r.d_ctr);
        ep.d_clr.push(r.d_clr);
        ep.flags.push(StepFlags {
            collision: r.collision,
            offroad: r.offroad,
        });
        ep.perturbed.push(r.perturbed);
    }
    ep.validate()
        .map_err(|e| DapError::format(path, e.to_string()))?;
    Ok(ep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest directory.
    pub path: String,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub command: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub root_seed: u64,
    pub sim: SimConfig,
    pub episodes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Seed of episode `i` under `root`.
pub fn episode_seed(root: u64, i: usize) -> u64 {
    sub_seed(root, &format!("episode/{i}"))
}

/// Generates `n` episodes into `dir/episodes/` and writes the manifest.
/// Episodes are produced in parallel and written in index order.
pub fn generate_dataset(
    n: usize,
    root_seed: u64,
    cfg: &SimConfig,
    grid: &KaGridConfig,
    dir: &Path,
    config_hash: &str,
) -> Result<(Manifest, Vec<Episode>)> {
    use rayon::prelude::*;
    cfg.validate()?;
    let ep_dir = dir.join("episodes");
    std::fs::create_dir_all(&ep_dir).map_err(|e| DapError::io(&ep_dir, e))?;
    let episodes: Vec<Episode> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = episode_seed(root_seed, i);
            rollout_episode(&cfg.scene(seed), cfg, grid, sub_seed(seed, "perturb"))
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(n);
    for (i, ep) in episodes.iter().enumerate() {
        let rel = format!("episodes/ep_{i:05}.jsonl");
        write_episode(&dir.join(&rel), ep)?;
        entries.push(ManifestEntry {
            path: rel,
            seed: ep.scene.seed,
            difficulty: ep.scene.difficulty,
            command: ep.command,
            frames: ep.len(),
        });
    }
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        root_seed,
        sim: cfg.clone(),
        episodes: entries,
    };
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok((manifest, episodes))
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut s =
        serde_json::to_string_pretty(m).map_err(|e| DapError::format(path, e.to_string()))?;
    s.push('\n');
    let mut f = std::fs::File::create(path).map_err(|e| DapError::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| DapError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let s = std::fs::read_to_string(path).map_err(|e| DapError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| DapError::format(path, e.to_string()))
}

/// Loads every episode listed in the manifest at `dir`.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Episode>)> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let episodes = manifest
        .episodes
        .iter()
        .map(|e| {
            let scene = build_scene(e.seed, e.difficulty);
            let path: PathBuf = dir.join(&e.path);
            read_episode(&path, scene, &manifest.sim.bev, manifest.sim.episode.dt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, episodes))
}
