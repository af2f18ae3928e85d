//! Glue between simulated episodes, the BEV codebook and the token model:
//! training windows, open-loop planners and closed-loop drivers.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::armodel::layout::seq_len_for_frames;
use crate::armodel::{
    generate, next_traj_logits, Checkpoint, DecodeMode, FrameTokens, Model, ModelConfig,
    StepRecord, TokenSequence, Trainer,
};
use crate::bevq::{encode, fit_codebook, patchify, BevGrid, Codebook, FitOptions};
use crate::error::{DapError, Result};
use crate::kinematics::{wrap_angle_unchecked, EgoState, KaPoint};
use crate::posttune::{posttune_pipeline, SmootherWeights};
use crate::rl::{RewardWeights, RlStepRecord, RlWindow, SacBcTrainer, Transition};
use crate::simworld::eval::{DrivingPolicy, Observation, OpenLoopPolicy, PolicyOutput};
use crate::simworld::raster::lane_likelihood_map;
use crate::simworld::{Episode, Scene, N_COMMANDS};
use crate::tokenize::{ka_detokenize, KaGridConfig, TrajTokenId, VocabLayout};

/// Model dimensions; vocabulary and length follow from the data settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub ffn_mult: usize,
    pub moe_every: usize,
    pub init_std: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            n_experts: 4,
            top_k: 2,
            ffn_mult: 2,
            moe_every: 1,
            init_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Context frames before the current one.
    pub history: usize,
    /// Future frames appended to each training window.
    pub n_step: usize,
    /// Frame offset between consecutive windows of one episode.
    pub window_stride: usize,
    pub codebook_size: usize,
    pub patch: usize,
    /// Patch vectors sampled for k-means.
    pub codebook_samples: usize,
    pub codebook_iters: usize,
    pub codebook_restarts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            history: 3,
            n_step: 3,
            window_stride: 3,
            codebook_size: 64,
            patch: 8,
            codebook_samples: 6000,
            codebook_iters: 30,
            codebook_restarts: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_step == 0 || self.window_stride == 0 || self.codebook_size == 0 || self.patch == 0
        {
            return Err(DapError::Config(
                "n_step, window_stride, codebook_size and patch must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn window_frames(&self) -> usize {
        self.history + 1 + self.n_step
    }
}

pub fn model_config(
    shape: &ModelShape,
    data: &DataConfig,
    bev_tokens_per_frame: usize,
    grid: &KaGridConfig,
) -> Result<ModelConfig> {
    let c = ModelConfig {
        d_model: shape.d_model,
        n_layers: shape.n_layers,
        n_heads: shape.n_heads,
        n_experts: shape.n_experts,
        top_k: shape.top_k,
        ffn_mult: shape.ffn_mult,
        moe_every: shape.moe_every,
        vocab: VocabLayout::new(N_COMMANDS, data.codebook_size, grid.codebook_size())?,
        history: data.history,
        bev_tokens_per_frame,
        max_seq_len: seq_len_for_frames(data.window_frames(), bev_tokens_per_frame),
        init_std: shape.init_std,
    };
    c.validate()?;
    Ok(c)
}

/// k-means codebook over a seeded subsample of every episode's BEV patches.
pub fn fit_bev_codebook(episodes: &[Episode], data: &DataConfig, seed: u64) -> Result<Codebook> {
    let mut vectors = Vec::new();
    for ep in episodes {
        for g in &ep.bev {
            vectors.extend(patchify(g, data.patch, data.patch)?);
        }
    }
    if vectors.is_empty() {
        return Err(DapError::Size("no BEV frames to fit a codebook".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vectors.shuffle(&mut rng);
    vectors.truncate(data.codebook_samples.max(data.codebook_size));
    let n_classes = episodes[0].bev[0].n_classes;
    fit_codebook(
        &vectors,
        data.codebook_size,
        seed,
        data.patch,
        data.patch,
        n_classes,
        FitOptions {
            max_iters: data.codebook_iters,
            restarts: data.codebook_restarts,
        },
    )
}

/// BEV token ids of every frame of every episode.
pub fn encode_episodes(episodes: &[Episode], cb: &Codebook) -> Result<Vec<Vec<Vec<u32>>>> {
    episodes
        .par_iter()
        .map(|ep| {
            ep.bev
                .iter()
                .map(|g| Ok(encode(g, cb)?.tokens))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn frame_tokens(
    bev: &[Vec<u32>],
    actions: &[TrajTokenId],
    frames: std::ops::Range<usize>,
    last_action: bool,
) -> Vec<FrameTokens> {
    let end = frames.end;
    frames
        .map(|f| FrameTokens {
            bev: bev[f].clone(),
            traj: (f + 1 < end || last_action).then(|| actions[f]),
        })
        .collect()
}

/// Window start frames of an episode with `len` frames; the final window
/// always ends at the last frame.
pub fn window_starts(len: usize, frames: usize, stride: usize) -> Vec<usize> {
    if len < frames {
        return Vec::new();
    }
    let mut s: Vec<usize> = (0..=len - frames).step_by(stride).collect();
    if *s.last().unwrap() != len - frames {
        s.push(len - frames);
    }
    s
}

/// Stage-I windows of `history + 1 + n_step` frames with executed actions.
pub fn bc_windows(
    episodes: &[Episode],
    bev: &[Vec<Vec<u32>>],
    config: &ModelConfig,
    data: &DataConfig,
) -> Result<Vec<TokenSequence>> {
    let m = config.bev_tokens_per_frame;
    let frames = data.window_frames();
    let mut out = Vec::new();
    for (ep, b) in episodes.iter().zip(bev) {
        for f0 in window_starts(ep.len(), frames, data.window_stride) {
            let ft = frame_tokens(b, &ep.tokens, f0..f0 + frames, true);
            out.push(TokenSequence::build(ep.command, &ft, &config.vocab, m)?);
        }
    }
    Ok(out)
}

/// Stage-II windows: the same frames, with transitions at the last
/// `n_step` decision points. `r_t` is the frame reward at `t + 1`.
pub fn rl_windows(
    episodes: &[Episode],
    bev: &[Vec<Vec<u32>>],
    config: &ModelConfig,
    data: &DataConfig,
    w: &RewardWeights,
) -> Result<Vec<RlWindow>> {
    let m = config.bev_tokens_per_frame;
    let frames = data.window_frames();
    let mut out = Vec::new();
    for (ep, b) in episodes.iter().zip(bev) {
        let totals = ep.reward_totals(w);
        for f0 in window_starts(ep.len(), frames, data.window_stride) {
            let ft = frame_tokens(b, &ep.tokens, f0..f0 + frames, true);
            let seq = TokenSequence::build(ep.command, &ft, &config.vocab, m)?;
            let transitions = (data.history..frames - 1)
                .map(|j| {
                    let g = f0 + j;
                    Transition {
                        frame: j,
                        action: ep.tokens[g],
                        expert_action: ep.expert_tokens[g],
                        reward: totals[g + 1],
                        done: g + 2 == ep.len(),
                    }
                })
                .collect();
            out.push(RlWindow { seq, transitions });
        }
    }
    Ok(out)
}

/// Context `[C, V_{t−H}, A_{t−H}, …, V_t]` ending before the action of frame `t`.
pub fn context_sequence(
    command: usize,
    bev: &[Vec<u32>],
    actions: &[TrajTokenId],
    t: usize,
    history: usize,
    config: &ModelConfig,
) -> Result<TokenSequence> {
    let f0 = t.saturating_sub(history);
    let ft = frame_tokens(bev, actions, f0..t + 1, false);
    TokenSequence::build(command, &ft, &config.vocab, config.bev_tokens_per_frame)
}

/// Greedy autoregressive planner over recorded episodes.
pub struct ModelPlanner<'a> {
    pub model: &'a Model,
    pub codebook: &'a Codebook,
}

impl OpenLoopPolicy for ModelPlanner<'_> {
    fn predict(&self, ep: &Episode, t0: usize, steps: usize) -> Result<Vec<TrajTokenId>> {
        let h = self.model.config.history;
        let f0 = t0.saturating_sub(h);
        let mut bev = vec![Vec::new(); t0 + 1];
        for (f, slot) in bev.iter_mut().enumerate().skip(f0) {
            *slot = encode(&ep.bev[f], self.codebook)?.tokens;
        }
        let ctx = context_sequence(ep.command, &bev, &ep.tokens, t0, h, &self.model.config)?;
        Ok(generate(self.model, &ctx, steps, DecodeMode::Greedy)?
            .into_iter()
            .map(|f| f.traj)
            .collect())
    }
}

/// Settings of the post-tuned closed-loop driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostTuneDriving {
    pub weights: SmootherWeights,
    /// Planned steps refined per decision.
    pub plan_steps: usize,
    /// Refined waypoint the executed arc passes through.
    pub lookahead: usize,
    /// Executed poses prepended to the plan so the refined start joins past motion.
    pub history: usize,
    pub map_half_extent: f64,
    pub map_resolution: f64,
    pub map_sigma: f64,
}

impl Default for PostTuneDriving {
    fn default() -> Self {
        PostTuneDriving {
            weights: SmootherWeights {
                w_s1: 0.0,
                ..SmootherWeights::default()
            },
            plan_steps: 6,
            lookahead: 2,
            history: 1,
            map_half_extent: 25.0,
            map_resolution: 0.5,
            map_sigma: 0.75,
        }
    }
}

impl PostTuneDriving {
    /// Post-tunes `poses` against a lane map centred on `poses[0]`, with the
    /// lane centerline from 5 m behind it as the Frenet reference.
    pub fn refine(&self, scene: &Scene, poses: &[EgoState]) -> Result<Vec<EgoState>> {
        let p0 = poses[0];
        let map = lane_likelihood_map(
            scene,
            (p0.x, p0.y),
            self.map_half_extent,
            self.map_resolution,
            self.map_sigma,
        )?;
        let s0 = scene.lane.project(p0.x, p0.y).s;
        let reference: Vec<(f64, f64)> = (0..=((self.map_half_extent * 2.0) as usize))
            .map(|k| {
                let p = scene.lane.pose_at(s0 - 5.0 + k as f64);
                (p.x, p.y)
            })
            .collect();
        Ok(posttune_pipeline(poses, &map, &reference, &self.weights)?.trajectory)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.plan_steps < 2 || self.lookahead == 0 || self.lookahead > self.plan_steps {
            return Err(DapError::Config(
                "post-tuned driving needs plan_steps >= 2 and 1 <= lookahead <= plan_steps".into(),
            ));
        }
        if !(self.map_half_extent > 0.0 && self.map_resolution > 0.0 && self.map_sigma > 0.0) {
            return Err(DapError::Config(
                "lane map extent, resolution and sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-loop token policy: encodes the BEV history, reads the greedy
/// trajectory token and optionally refines a multi-step plan.
pub struct ModelDriver {
    pub model: Arc<Model>,
    pub codebook: Arc<Codebook>,
    pub grid: KaGridConfig,
    pub posttune: Option<PostTuneDriving>,
    cache: Vec<Option<Vec<u32>>>,
}

impl ModelDriver {
    pub fn new(
        model: Arc<Model>,
        codebook: Arc<Codebook>,
        grid: KaGridConfig,
        posttune: Option<PostTuneDriving>,
    ) -> Self {
        ModelDriver {
            model,
            codebook,
            grid,
            posttune,
            cache: Vec::new(),
        }
    }

    fn bev_tokens(&mut self, frames: &[BevGrid], from: usize) -> Result<Vec<Vec<u32>>> {
        if self.cache.len() < frames.len() {
            self.cache.resize(frames.len(), None);
        }
        let mut out = vec![Vec::new(); frames.len()];
        for f in from..frames.len() {
            if self.cache[f].is_none() {
                self.cache[f] = Some(encode(&frames[f], &self.codebook)?.tokens);
            }
            out[f] = self.cache[f].clone().unwrap();
        }
        Ok(out)
    }

    /// First action of the refined plan: the circular arc from the current
    /// pose through the refined waypoint `lookahead` steps ahead sets the
    /// curvature, the change between the first two refined step lengths sets
    /// the acceleration.
    fn refine(
        &self,
        obs: &Observation,
        ctx: &TokenSequence,
        pt: &PostTuneDriving,
    ) -> Result<Option<KaPoint>> {
        let plan = generate(&self.model, ctx, pt.plan_steps, DecodeMode::Greedy)?;
        let tokens: Vec<TrajTokenId> = plan.iter().map(|f| f.traj).collect();
        let (pose, v) = (obs.pose(), obs.speed());
        let planned = ka_detokenize(&tokens, pose, v, obs.dt, &self.grid)?;
        if v * obs.dt < 0.5 || planned.len() < 3 {
            return Ok(None);
        }
        let c = pt.history.min(obs.poses.len() - 1);
        let mut poses = obs.poses[obs.poses.len() - 1 - c..obs.poses.len() - 1].to_vec();
        poses.extend(planned);
        let out = pt.refine(obs.scene, &poses)?;
        let step1 = out[c + 1].distance(&out[c]);
        let step2 = out[c + 2].distance(&out[c + 1]);
        let target = &out[(c + pt.lookahead).clamp(c + 1, out.len() - 1)];
        let (dx, dy) = (target.x - pose.x, target.y - pose.y);
        let kappa = 2.0 * wrap_angle_unchecked(dy.atan2(dx) - pose.yaw).sin() / dx.hypot(dy);
        let a = (step2 - step1) / (obs.dt * obs.dt);
        let g = &self.grid;
        Ok(Some(KaPoint::new(
            kappa.clamp(g.kappa.lo(), g.kappa.hi()),
            a.clamp(g.accel.lo(), g.accel.hi()),
        )))
    }
}

impl DrivingPolicy for ModelDriver {
    fn act(&mut self, obs: &Observation) -> Result<PolicyOutput> {
        let h = self.model.config.history;
        let t = obs.poses.len() - 1;
        let bev = self.bev_tokens(obs.bev, t.saturating_sub(h))?;
        let ctx = context_sequence(
            obs.scene.command,
            &bev,
            obs.tokens,
            t,
            h,
            &self.model.config,
        )?;
        if let Some(pt) = self.posttune.clone() {
            if let Some(a) = self.refine(obs, &ctx, &pt)? {
                return Ok(PolicyOutput::Continuous(a));
            }
        }
        let logits = next_traj_logits(&self.model, &ctx)?;
        Ok(PolicyOutput::Token(
            crate::armodel::ops::argmax(&logits) as u32
        ))
    }
}

const CODEBOOK_SHAPE: &str = "bev_codebook_shape";
const CODEBOOK_ENTRIES: &str = "bev_codebook";

/// Stores the BEV codebook alongside the model parameters.
pub fn attach_codebook(ck: &mut Checkpoint, cb: &Codebook) {
    ck.extras
        .retain(|(n, _)| n != CODEBOOK_SHAPE && n != CODEBOOK_ENTRIES);
    let shape = [cb.k, cb.patch_h, cb.patch_w, cb.n_classes]
        .map(|v| v as f64)
        .to_vec();
    ck.extras.push((CODEBOOK_SHAPE.into(), shape));
    ck.extras
        .push((CODEBOOK_ENTRIES.into(), cb.entries.clone()));
}

pub fn checkpoint_codebook(ck: &Checkpoint) -> Result<Codebook> {
    let missing = || DapError::Validation("checkpoint carries no BEV codebook".into());
    let shape = ck.extra(CODEBOOK_SHAPE).ok_or_else(missing)?;
    let entries = ck.extra(CODEBOOK_ENTRIES).ok_or_else(missing)?;
    if shape.len() != 4 {
        return Err(DapError::Validation("malformed BEV codebook shape".into()));
    }
    let [k, ph, pw, nc] = [shape[0], shape[1], shape[2], shape[3]].map(|v| v as usize);
    let dim = ph * pw * nc;
    if entries.len() != k * dim {
        return Err(DapError::Validation(format!(
            "BEV codebook holds {} values, expected {}",
            entries.len(),
            k * dim
        )));
    }
    Ok(Codebook {
        k,
        dim,
        patch_h: ph,
        patch_w: pw,
        n_classes: nc,
        entries: entries.to_vec(),
    })
}

/// Runs `cfg.epochs` stage-I epochs from `epoch0`, calling `on_epoch` after each.
pub fn train_bc(
    trainer: &mut Trainer,
    windows: &[TokenSequence],
    epoch0: usize,
    log: &mut Vec<StepRecord>,
    mut on_epoch: impl FnMut(usize, &Trainer) -> Result<()>,
) -> Result<()> {
    for e in epoch0..trainer.cfg.epochs {
        trainer.run_epoch(windows, e, log)?;
        on_epoch(e, trainer)?;
    }
    Ok(())
}

/// Runs `cfg.epochs` stage-II epochs.
pub fn train_sacbc(
    trainer: &mut SacBcTrainer,
    windows: &[RlWindow],
    log: &mut Vec<RlStepRecord>,
) -> Result<()> {
    for e in 0..trainer.cfg.epochs {
        trainer.run_epoch(windows, e, log)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{episode_seed, rollout_episode, SimConfig};

    fn setup(n: usize) -> (Vec<Episode>, Codebook, ModelConfig, DataConfig) {
        let cfg = SimConfig::default();
        let grid = KaGridConfig::fb_ka_a();
        let eps: Vec<Episode> = (0..n)
            .map(|i| {
                rollout_episode(&cfg.scene(episode_seed(1, i)), &cfg, &grid, i as u64).unwrap()
            })
            .collect();
        let data = DataConfig {
            codebook_samples: 800,
            codebook_iters: 5,
            ..Default::default()
        };
        let cb = fit_bev_codebook(&eps, &data, 3).unwrap();
        let m = (32 / data.patch) * (32 / data.patch);
        let mc = model_config(&ModelShape::default(), &data, m, &grid).unwrap();
        (eps, cb, mc, data)
    }

    #[test]
    fn windows_are_valid_sequences() {
        let (eps, cb, mc, data) = setup(3);
        let bev = encode_episodes(&eps, &cb).unwrap();
        let bc = bc_windows(&eps, &bev, &mc, &data).unwrap();
        let per = window_starts(24, data.window_frames(), data.window_stride).len();
        assert_eq!(bc.len(), 3 * per);
        for s in &bc {
            s.validate(&mc.vocab, mc.max_seq_len).unwrap();
            assert_eq!(s.len(), mc.max_seq_len);
        }
        let model = Model::init(mc.clone(), 0).unwrap();
        let rl = rl_windows(&eps, &bev, &mc, &data, &RewardWeights::default()).unwrap();
        assert_eq!(rl.len(), bc.len());
        for w in &rl {
            w.validate(&model).unwrap();
            assert_eq!(w.transitions.len(), data.n_step);
        }
        assert!(rl.iter().any(|w| w.transitions.iter().any(|t| t.done)));
    }

    #[test]
    fn last_window_reaches_episode_end() {
        assert_eq!(window_starts(24, 7, 3), vec![0, 3, 6, 9, 12, 15, 17]);
        assert_eq!(window_starts(10, 7, 3), vec![0, 3]);
        assert_eq!(window_starts(7, 7, 3), vec![0]);
        assert!(window_starts(6, 7, 3).is_empty());
    }

    #[test]
    fn context_ends_at_decision_point() {
        let (eps, cb, mc, _) = setup(1);
        let bev = encode_episodes(&eps, &cb).unwrap();
        let ctx = context_sequence(eps[0].command, &bev[0], &eps[0].tokens, 10, 3, &mc).unwrap();
        assert_eq!(ctx.len(), seq_len_for_frames(4, 16) - 1);
        let model = Model::init(mc, 0).unwrap();
        let p = ModelPlanner {
            model: &model,
            codebook: &cb,
        }
        .predict(&eps[0], 10, 8)
        .unwrap();
        assert_eq!(p.len(), 8);
    }
}
