//! Enumerable contextual bandit: each state is a command token, each of the
//! four trajectory tokens an action with a fixed reward.

use crate::armodel::layout::{FrameTokens, TokenSequence};
use crate::armodel::model::{Model, ModelConfig};
use crate::armodel::ops::argmax;
use crate::error::Result;
use crate::seeding::sub_seed;
use crate::tokenize::{Modality, TrajTokenId, VocabLayout};

use super::sacbc::{
    decision_position, RlStepRecord, RlWindow, SacBcConfig, SacBcTrainer, Transition,
};

/// Reward of action `a` in state `s`.
pub const BANDIT_REWARDS: [[f64; 4]; 3] = [
    [1.0, 0.2, 0.5, 0.0],
    [0.1, 0.3, 0.9, 0.4],
    [0.6, 1.0, 0.2, 0.3],
];

#[derive(Clone, Debug, PartialEq)]
pub struct BanditOutcome {
    pub optimal: [usize; 3],
    pub greedy: [usize; 3],
    /// First step after which the greedy policy matched in every state.
    pub solved_at: Option<u64>,
    pub steps: u64,
    pub log: Vec<RlStepRecord>,
}

impl BanditOutcome {
    pub fn solved(&self) -> bool {
        self.greedy == self.optimal
    }
}

pub fn bandit_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        n_experts: 2,
        top_k: 1,
        ffn_mult: 2,
        moe_every: 1,
        vocab: VocabLayout {
            n_command: 3,
            n_bev: 1,
            n_traj: 4,
        },
        history: 0,
        bev_tokens_per_frame: 1,
        max_seq_len: 3,
        init_std: 0.1,
    }
}

pub fn bandit_sacbc_config() -> SacBcConfig {
    SacBcConfig {
        lr_policy: 3e-3,
        lr_critic: 3e-3,
        weight_decay: 0.0,
        batch_size: 12,
        critic_hidden: 16,
        critic_init_std: 0.1,
        tau: 0.05,
        lambda_bev: 0.0,
        ..SacBcConfig::default()
    }
}

/// Uniform behavior data: every (state, action) pair once, labelled with
/// its own action so imitation alone carries no preference.
pub fn bandit_windows(vocab: &VocabLayout) -> Result<Vec<RlWindow>> {
    let mut out = Vec::new();
    for (s, row) in BANDIT_REWARDS.iter().enumerate() {
        for (a, &r) in row.iter().enumerate() {
            let frames = [FrameTokens {
                bev: vec![0],
                traj: Some(TrajTokenId(a as u32)),
            }];
            let seq = TokenSequence::build(s, &frames, vocab, 1)?;
            out.push(RlWindow {
                seq,
                transitions: vec![Transition {
                    frame: 0,
                    action: TrajTokenId(a as u32),
                    expert_action: TrajTokenId(a as u32),
                    reward: r,
                    done: true,
                }],
            });
        }
    }
    Ok(out)
}

/// Greedy trajectory token per state.
pub fn bandit_greedy(model: &Model) -> Result<[usize; 3]> {
    let mut g = [0; 3];
    let traj = model.config.vocab.range(Modality::Traj);
    for (s, slot) in g.iter_mut().enumerate() {
        let frames = [FrameTokens {
            bev: vec![0],
            traj: None,
        }];
        let seq = TokenSequence::build(s, &frames, &model.config.vocab, 1)?;
        let cache = model.forward(&seq)?;
        *slot = argmax(&cache.logits_at(decision_position(0, 1), model.vocab_size())[traj.clone()]);
    }
    Ok(g)
}

/// Trains SAC-BC on the bandit for `max_steps` full-batch steps.
pub fn run_bandit(seed: u64, max_steps: u64) -> Result<BanditOutcome> {
    let config = bandit_model_config();
    let model = Model::init(config.clone(), sub_seed(seed, "bandit.model"))?;
    let data = bandit_windows(&config.vocab)?;
    let mut trainer =
        SacBcTrainer::new(model, bandit_sacbc_config(), sub_seed(seed, "bandit.sacbc"))?;
    let optimal = BANDIT_REWARDS.map(|row| argmax(&row));
    let mut log = Vec::new();
    let mut solved_at = None;
    for epoch in 0..max_steps as usize {
        trainer.run_epoch(&data, epoch, &mut log)?;
        let ok = bandit_greedy(&trainer.model)? == optimal;
        match (ok, solved_at) {
            (true, None) => solved_at = Some(trainer.opt.step),
            (false, Some(_)) => solved_at = None,
            _ => {}
        }
    }
    Ok(BanditOutcome {
        optimal,
        greedy: bandit_greedy(&trainer.model)?,
        solved_at,
        steps: trainer.opt.step,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewards_have_unique_optima() {
        for row in BANDIT_REWARDS {
            let best = argmax(&row);
            assert_eq!(row.iter().filter(|&&r| r == row[best]).count(), 1);
        }
    }

    #[test]
    fn sacbc_finds_optimal_actions() {
        for seed in 0..5 {
            let out = run_bandit(seed, 2000).unwrap();
            assert!(out.solved(), "{out:?}");
        }
    }
}
