//! Offline SAC-BC fine-tuning of the trajectory-token policy.
//!
//! The policy at a decision point is the softmax of the model's logits
//! restricted to the trajectory range, read at the last BEV token of the
//! frame. Critics read the final hidden state at the same position; with
//! `critic_backprop` their loss also reaches the backbone.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::armodel::layout::TokenSequence;
use crate::armodel::loss::cross_entropy;
use crate::armodel::model::{ForwardCache, Model};
use crate::armodel::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::error::{DapError, Result};
use crate::seeding::indexed_rng;
use crate::tokenize::{Modality, TrajTokenId};

use super::critic::{Critics, QHeadShape};
use super::objectives::{actor_loss, bc_loss, critic_loss, q_min, sac_target, softmax};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacBcConfig {
    pub gamma: f64,
    /// Fixed entropy weight.
    pub alpha: f64,
    pub alpha_cql: f64,
    /// Polyak rate of the target critics.
    pub tau: f64,
    pub lambda_critic: f64,
    pub lambda_actor: f64,
    /// Weight of the behavior-cloning term.
    pub lambda_bc: f64,
    pub lambda_awac: f64,
    pub awac_clip: f64,
    /// Weight of the teacher-forced BEV cross entropy kept during fine-tuning.
    pub lambda_bev: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub critic_hidden: usize,
    pub critic_init_std: f64,
    /// Whether the critic loss also trains the shared backbone.
    pub critic_backprop: bool,
}

impl Default for SacBcConfig {
    fn default() -> Self {
        SacBcConfig {
            gamma: 0.95,
            alpha: 0.05,
            alpha_cql: 0.5,
            tau: 0.01,
            lambda_critic: 1.0,
            lambda_actor: 1.0,
            lambda_bc: 1.0,
            lambda_awac: 1.0,
            awac_clip: 20.0,
            lambda_bev: 0.1,
            lr_policy: 1e-4,
            lr_critic: 3e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            batch_size: 8,
            epochs: 4,
            critic_hidden: 64,
            critic_init_std: 0.01,
            critic_backprop: true,
        }
    }
}

impl SacBcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DapError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.alpha >= 0.0 && self.alpha_cql >= 0.0) {
            return bad("alpha and alpha_cql must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.lambda_critic >= 0.0
            && self.lambda_actor >= 0.0
            && self.lambda_bc >= 0.0
            && self.lambda_bev >= 0.0)
        {
            return bad("loss weights must be non-negative");
        }
        if !(self.lambda_awac > 0.0 && self.awac_clip > 0.0) {
            return bad("lambda_awac and awac_clip must be positive");
        }
        if !(self.lr_policy > 0.0
            && self.lr_critic > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0)
        {
            return bad("learning rates must be positive; weight decay and clip non-negative");
        }
        if self.batch_size == 0 || self.critic_hidden == 0 {
            return bad("batch_size and critic_hidden must be positive");
        }
        Ok(())
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One decision inside an [`RlWindow`].
///
/// `ctx_t` is the window prefix ending at the last BEV token of `frame`;
/// `ctx_{t+1}` is the prefix ending at the last BEV token of `frame + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub frame: usize,
    /// Action actually executed; also the token the window holds after `ctx_t`.
    pub action: TrajTokenId,
    pub expert_action: TrajTokenId,
    pub reward: f64,
    pub done: bool,
}

/// A token window and the transitions it supports; one forward pass
/// serves every transition.
#[derive(Clone, Debug, PartialEq)]
pub struct RlWindow {
    pub seq: TokenSequence,
    pub transitions: Vec<Transition>,
}

/// Position whose logits predict the action of `frame`.
pub fn decision_position(frame: usize, m: usize) -> usize {
    frame * (m + 1) + m
}

impl RlWindow {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let c = &model.config;
        self.seq.validate(&c.vocab, c.max_seq_len)?;
        let m = self.seq.bev_per_frame;
        let traj = c.vocab.range(Modality::Traj);
        for t in &self.transitions {
            for a in [t.action, t.expert_action] {
                if a.index() >= traj.len() {
                    return Err(DapError::Domain(format!(
                        "action {} outside trajectory vocabulary",
                        a.index()
                    )));
                }
            }
            if !t.reward.is_finite() {
                return Err(DapError::Domain("non-finite reward".into()));
            }
            let pos = decision_position(t.frame, m);
            if pos >= self.seq.len() {
                return Err(DapError::Sequence(format!(
                    "frame {} has no decision position in the window",
                    t.frame
                )));
            }
            if let Some(&tok) = self.seq.tokens.get(pos + 1) {
                if tok as usize != traj.start + t.action.index() {
                    return Err(DapError::Sequence(format!(
                        "window token after frame {} differs from its action",
                        t.frame
                    )));
                }
            }
            if !t.done && decision_position(t.frame + 1, m) >= self.seq.len() {
                return Err(DapError::Sequence(format!(
                    "frame {} needs its successor context",
                    t.frame
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RlStepRecord {
    pub step: u64,
    pub l_critic: f64,
    pub l_actor: f64,
    pub l_bc: f64,
    pub l_bev: f64,
    pub total: f64,
    pub mean_reward: f64,
    pub mean_adv: f64,
    pub mean_w: f64,
    pub target_drift: f64,
}

pub const RL_LOG_HEADER: &str =
    "step,L_critic,L_actor,L_BC,mean_reward,mean_Adv,mean_w,target_drift";

pub fn write_rl_record<W: Write>(out: &mut W, r: &RlStepRecord) -> std::io::Result<()> {
    writeln!(
        out,
        "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
        r.step, r.l_critic, r.l_actor, r.l_bc, r.mean_reward, r.mean_adv, r.mean_w, r.target_drift
    )
}

/// Losses and gradients of one batch, before any parameter changes.
pub struct SacBcGradients {
    pub record: RlStepRecord,
    pub model: Vec<f64>,
    pub critics: [Vec<f64>; 2],
}

fn rows(cache: &ForwardCache, positions: &[usize], d: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        x.extend_from_slice(cache.hidden_at(p, d));
    }
    x
}

/// Evaluates `λ_critic L_critic + λ_actor L_actor + λ L_BC + λ_bev L_bev`
/// and its gradients. Targets are built from the current policy and the
/// target critics without gradient.
pub fn sacbc_gradients(
    model: &Model,
    critics: &Critics,
    batch: &[RlWindow],
    cfg: &SacBcConfig,
) -> Result<SacBcGradients> {
    let n_tr: usize = batch.iter().map(|w| w.transitions.len()).sum();
    if n_tr == 0 {
        return Err(DapError::Size("SAC-BC batch has no transitions".into()));
    }
    let (d, v) = (model.config.d_model, model.vocab_size());
    let k = critics.shape().actions;
    let traj = model.config.vocab.range(Modality::Traj);
    if k != traj.len() {
        return Err(DapError::Config(format!(
            "critics score {k} actions but the trajectory vocabulary has {}",
            traj.len()
        )));
    }
    let n_bev: usize = batch
        .iter()
        .map(|w| {
            (1..w.seq.len())
                .filter(|&q| w.seq.modality(q) == Modality::Bev)
                .count()
        })
        .sum();
    let inv_n = 1.0 / n_tr as f64;
    let mut rec = RlStepRecord::default();
    let mut gm = vec![0.0; model.param_count()];
    let mut gc = [
        vec![0.0; critics.q[0].params.len()],
        vec![0.0; critics.q[1].params.len()],
    ];

    for w in batch {
        w.validate(model)?;
        let m = w.seq.bev_per_frame;
        let cache = model.forward(&w.seq)?;
        let pos: Vec<usize> = w
            .transitions
            .iter()
            .map(|t| decision_position(t.frame, m))
            .collect();
        let next: Vec<usize> = w
            .transitions
            .iter()
            .map(|t| decision_position(t.frame + 1, m).min(w.seq.len() - 1))
            .collect();
        let x = rows(&cache, &pos, d);
        let xn = rows(&cache, &next, d);
        let qc = [critics.q[0].forward(&x), critics.q[1].forward(&x)];
        let qn = [
            critics.target[0].forward(&xn),
            critics.target[1].forward(&xn),
        ];
        let mut dq = [vec![0.0; qc[0].q.len()], vec![0.0; qc[1].q.len()]];
        let mut dlogits = vec![0.0; w.seq.len() * v];

        for (r, t) in w.transitions.iter().enumerate() {
            let y = if t.done {
                t.reward
            } else {
                let pi_next = softmax(&cache.logits_at(next[r], v)[traj.clone()]);
                sac_target(
                    t.reward,
                    cfg.gamma,
                    cfg.alpha,
                    &pi_next,
                    qn[0].row(r, k),
                    qn[1].row(r, k),
                    false,
                )?
            };
            let q1 = qc[0].row(r, k);
            let q2 = qc[1].row(r, k);
            let ct = critic_loss([q1, q2], t.action.index(), y, cfg.alpha_cql);
            rec.l_critic += ct.loss * inv_n;
            for i in 0..2 {
                for (dst, g) in dq[i][r * k..(r + 1) * k].iter_mut().zip(&ct.grads[i]) {
                    *dst = cfg.lambda_critic * inv_n * g;
                }
            }

            let qm = q_min(q1, q2);
            let z = &cache.logits_at(pos[r], v)[traj.clone()];
            let (la, ga) = actor_loss(z, &qm, cfg.alpha);
            let bc = bc_loss(
                z,
                &qm,
                t.expert_action.index(),
                cfg.lambda_awac,
                cfg.awac_clip,
            );
            rec.l_actor += la * inv_n;
            rec.l_bc += bc.loss * inv_n;
            rec.mean_reward += t.reward * inv_n;
            rec.mean_adv += bc.adv * inv_n;
            rec.mean_w += bc.weight * inv_n;
            let row = &mut dlogits[pos[r] * v + traj.start..pos[r] * v + traj.end];
            for ((dst, a), b) in row.iter_mut().zip(&ga).zip(&bc.grad) {
                *dst += inv_n * (cfg.lambda_actor * a + cfg.lambda_bc * b);
            }
        }

        if n_bev > 0 {
            let scale = 1.0 / n_bev as f64;
            for q in 1..w.seq.len() {
                if w.seq.modality(q) != Modality::Bev {
                    continue;
                }
                let target = w.seq.tokens[q] as usize;
                let (loss, probs) = cross_entropy(cache.logits_at(q - 1, v), target);
                rec.l_bev += loss * scale;
                if cfg.lambda_bev != 0.0 {
                    let g = &mut dlogits[(q - 1) * v..q * v];
                    for (gi, pi) in g.iter_mut().zip(&probs) {
                        *gi += cfg.lambda_bev * scale * pi;
                    }
                    g[target] -= cfg.lambda_bev * scale;
                }
            }
        }

        let mut dx = cfg.critic_backprop.then(|| vec![0.0; x.len()]);
        for i in 0..2 {
            critics.q[i].backward(&qc[i], &dq[i], &mut gc[i], dx.as_deref_mut());
        }
        let dhidden = dx.map(|dx| {
            let mut dh = vec![0.0; w.seq.len() * d];
            for (r, &p) in pos.iter().enumerate() {
                for (dst, g) in dh[p * d..(p + 1) * d]
                    .iter_mut()
                    .zip(&dx[r * d..(r + 1) * d])
                {
                    *dst += g;
                }
            }
            dh
        });
        model.backward_with_hidden(&cache, &dlogits, dhidden.as_deref(), 0.0, &mut gm);
    }
    rec.total = cfg.lambda_critic * rec.l_critic
        + cfg.lambda_actor * rec.l_actor
        + cfg.lambda_bc * rec.l_bc
        + cfg.lambda_bev * rec.l_bev;
    let finite =
        rec.total.is_finite() && gm.iter().chain(&gc[0]).chain(&gc[1]).all(|g| g.is_finite());
    if !finite {
        return Err(DapError::Training(format!(
            "non-finite SAC-BC loss: critic {} actor {} bc {} bev {}",
            rec.l_critic, rec.l_actor, rec.l_bc, rec.l_bev
        )));
    }
    Ok(SacBcGradients {
        record: rec,
        model: gm,
        critics: gc,
    })
}

/// One gradient step on the policy and each critic, then the Polyak update.
pub fn sacbc_step(
    model: &mut Model,
    opt: &mut AdamW,
    critics: &mut Critics,
    batch: &[RlWindow],
    cfg: &SacBcConfig,
) -> Result<RlStepRecord> {
    let SacBcGradients {
        mut record,
        model: mut gm,
        critics: gc,
    } = sacbc_gradients(model, critics, batch, cfg)?;
    if cfg.grad_clip > 0.0 {
        clip_global_norm(&mut gm, cfg.grad_clip);
    }
    opt.update(&mut model.params.data, &gm);
    critics.apply(gc, cfg.grad_clip);
    critics.polyak(cfg.tau);
    record.step = opt.step;
    record.target_drift = critics.target_drift();
    Ok(record)
}

/// Epoch-based stage-II trainer.
pub struct SacBcTrainer {
    pub model: Model,
    pub opt: AdamW,
    pub critics: Critics,
    pub cfg: SacBcConfig,
    pub seed: u64,
}

impl SacBcTrainer {
    pub fn new(model: Model, cfg: SacBcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let shape = QHeadShape {
            input: model.config.d_model,
            hidden: cfg.critic_hidden,
            actions: model.config.vocab.n_traj,
        };
        let critics = Critics::init(shape, seed, cfg.critic_init_std, cfg.adamw(cfg.lr_critic))?;
        Ok(SacBcTrainer {
            opt: AdamW::new(cfg.adamw(cfg.lr_policy), model.params.decay_mask()),
            model,
            critics,
            cfg,
            seed,
        })
    }

    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut indexed_rng(self.seed ^ 0x5341_4342, epoch as u64));
        order
    }

    pub fn run_epoch(
        &mut self,
        windows: &[RlWindow],
        epoch: usize,
        log: &mut Vec<RlStepRecord>,
    ) -> Result<()> {
        if windows.is_empty() {
            return Err(DapError::Size("no SAC-BC windows".into()));
        }
        let order = self.epoch_order(epoch, windows.len());
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<RlWindow> = chunk.iter().map(|&i| windows[i].clone()).collect();
            log.push(sacbc_step(
                &mut self.model,
                &mut self.opt,
                &mut self.critics,
                &batch,
                &self.cfg,
            )?);
        }
        Ok(())
    }
}
