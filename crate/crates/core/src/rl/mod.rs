//! Rewards and offline SAC-BC fine-tuning of the trajectory-token policy.

pub mod bandit;
pub mod critic;
pub mod objectives;
pub mod reward;
pub mod sacbc;

pub use critic::{Critics, QHead, QHeadShape};
pub use objectives::{actor_loss, awac_weight, bc_loss, critic_loss, sac_target};
pub use reward::{
    reward_centerline, reward_clearance, reward_comfort, reward_components, reward_total,
    RewardComponents, RewardWeights,
};
pub use sacbc::{
    sacbc_step, RlStepRecord, RlWindow, SacBcConfig, SacBcTrainer, Transition, RL_LOG_HEADER,
};
