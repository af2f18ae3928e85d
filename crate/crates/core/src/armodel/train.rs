//! Stage-I supervised training: scheduled-sampling ramp, clipped AdamW
//! steps and the per-step loss log.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};
use crate::seeding::indexed_rng;

use super::layout::TokenSequence;
use super::loss::{joint_loss, JointLoss, LossWeights, MixSampling};
use super::model::Model;
use super::optim::{clip_global_norm, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_traj: f64,
    pub lambda_bev: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Future frames appended to each `H + 1`-frame context window.
    pub n_step: usize,
    /// Leading epochs with pure teacher forcing.
    pub bc_epochs: usize,
    /// Epoch (1-based) at which the sampling probability reaches `p_max`.
    pub ramp_end_epoch: usize,
    pub p_max: f64,
    pub mix_sampling: MixSampling,
    pub aux_loss_coef: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_traj: 1.0,
            lambda_bev: 0.1,
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            batch_size: 8,
            epochs: 16,
            n_step: 3,
            bc_epochs: 4,
            ramp_end_epoch: 16,
            p_max: 0.5,
            mix_sampling: MixSampling::Greedy,
            aux_loss_coef: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DapError::Config(m.into()));
        if !(self.lambda_traj >= 0.0 && self.lambda_bev >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("lr must be positive; weight decay and clip non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return bad("p_max must lie in [0, 1]");
        }
        if self.ramp_end_epoch <= self.bc_epochs && self.p_max > 0.0 {
            return bad("ramp_end_epoch must exceed bc_epochs");
        }
        if self.aux_loss_coef < 0.0 {
            return bad("aux_loss_coef must be non-negative");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_traj: self.lambda_traj,
            lambda_bev: self.lambda_bev,
            aux_coef: self.aux_loss_coef,
        }
    }

    /// Sampling probability for 0-based `epoch`: zero for the first
    /// `bc_epochs`, then linear up to `p_max` at 1-based `ramp_end_epoch`.
    pub fn sampling_prob(&self, epoch: usize) -> f64 {
        if epoch < self.bc_epochs || self.p_max == 0.0 {
            return 0.0;
        }
        let span = (self.ramp_end_epoch - self.bc_epochs) as f64;
        self.p_max * ((epoch - self.bc_epochs + 1) as f64 / span).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: JointLoss,
    pub p: f64,
    pub grad_norm: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,total,l_traj,l_bev,p,grad_norm";

pub fn write_step_record<W: Write>(out: &mut W, r: &StepRecord) -> std::io::Result<()> {
    writeln!(
        out,
        "{},{:.9},{:.9},{:.9},{:.6},{:.9}",
        r.step, r.loss.total, r.loss.l_traj, r.loss.l_bev, r.p, r.grad_norm
    )
}

/// One clipped AdamW update on `batch`; the scheduled-sampling draws use
/// the stream of `(seed, opt.step)` so resumed runs replay identically.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[TokenSequence],
    cfg: &TrainConfig,
    p: f64,
    seed: u64,
) -> Result<StepRecord> {
    let mut rng = indexed_rng(seed, opt.step);
    let mut grads = vec![0.0; model.param_count()];
    let loss = joint_loss(
        model,
        batch,
        cfg.loss_weights(),
        p,
        cfg.mix_sampling,
        &mut rng,
        Some(&mut grads),
    )?;
    if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(DapError::Training(format!(
            "non-finite loss at step {}: total {} (traj {}, bev {})",
            opt.step, loss.total, loss.l_traj, loss.l_bev
        )));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    opt.update(&mut model.params.data, &grads);
    Ok(StepRecord {
        step: opt.step,
        loss,
        p,
        grad_norm,
    })
}

/// Epoch-based trainer over a fixed list of windows.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let decay = model.params.decay_mask();
        Ok(Trainer {
            opt: AdamW::new(cfg.adamw(), decay),
            model,
            cfg,
            seed,
        })
    }

    pub fn steps_per_epoch(&self, n_windows: usize) -> u64 {
        n_windows.div_ceil(self.cfg.batch_size) as u64
    }

    /// Deterministic visiting order for `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = indexed_rng(self.seed ^ 0x5348_5546, epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(
        &mut self,
        windows: &[TokenSequence],
        epoch: usize,
        log: &mut Vec<StepRecord>,
    ) -> Result<()> {
        if windows.is_empty() {
            return Err(DapError::Size("no training windows".into()));
        }
        let p = self.cfg.sampling_prob(epoch);
        let order = self.epoch_order(epoch, windows.len());
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let rec = train_step(
                &mut self.model,
                &mut self.opt,
                &batch,
                &self.cfg,
                p,
                self.seed,
            )?;
            log.push(rec);
        }
        Ok(())
    }

    /// Epoch index implied by the optimizer step count.
    pub fn completed_epochs(&self, n_windows: usize) -> usize {
        (self.opt.step / self.steps_per_epoch(n_windows)) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::model::tests::{random_seq, tiny_config};

    #[test]
    fn ramp_schedule() {
        let c = TrainConfig::default();
        let p: Vec<f64> = (0..18).map(|e| c.sampling_prob(e)).collect();
        assert!(p[..4].iter().all(|&x| x == 0.0));
        assert!(p[4] > 0.0);
        assert!((p[15] - c.p_max).abs() < 1e-12 && p[17] == c.p_max);
        assert!(p.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn clip_zero_changes_only_decayed_weights() {
        let c = tiny_config(8, 1, 2, 1);
        let mut m = Model::init(c.clone(), 1).unwrap();
        let before = m.params.data.clone();
        let cfg = TrainConfig {
            grad_clip: 0.0,
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg.adamw(), m.params.decay_mask());
        let batch = vec![random_seq(&c, 16, 2)];
        train_step(&mut m, &mut opt, &batch, &cfg, 0.0, 0).unwrap();
        let mask = m.params.decay_mask();
        for i in 0..before.len() {
            let want = if mask[i] {
                before[i] * (1.0 - 0.01 * 0.1)
            } else {
                before[i]
            };
            assert!((m.params.data[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn overfit_loss_decreases() {
        let mut c = tiny_config(16, 2, 4, 2);
        c.init_std = 0.05;
        let m = Model::init(c.clone(), 3).unwrap();
        let data: Vec<TokenSequence> = (0..10).map(|i| random_seq(&c, 16, 100 + i)).collect();
        let cfg = TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 10,
            p_max: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(m, cfg, 0).unwrap();
        let mut log = Vec::new();
        for e in 0..50 {
            t.run_epoch(&data, e, &mut log).unwrap();
        }
        let losses: Vec<f64> = log.iter().map(|r| r.loss.total).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn step_records_are_deterministic() {
        let c = tiny_config(8, 1, 2, 1);
        let data: Vec<TokenSequence> = (0..5).map(|i| random_seq(&c, 16, i)).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            bc_epochs: 0,
            ramp_end_epoch: 2,
            ..Default::default()
        };
        let run = || {
            let mut t = Trainer::new(Model::init(c.clone(), 1).unwrap(), cfg.clone(), 9).unwrap();
            let mut log = Vec::new();
            t.run_epoch(&data, 0, &mut log).unwrap();
            t.run_epoch(&data, 1, &mut log).unwrap();
            (log, t.model.params.data)
        };
        assert_eq!(run(), run());
    }
}
