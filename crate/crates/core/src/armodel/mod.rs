//! Autoregressive sequence model over command, BEV and trajectory tokens.

pub mod checkpoint;
pub mod generate;
pub mod gradcheck;
pub mod layout;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use generate::{generate, next_traj_logits, DecodeMode, GeneratedFrame};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layout::{FrameTokens, TokenSequence};
pub use loss::{joint_loss, joint_loss_with_inputs, JointLoss, LossWeights, MixSampling};
pub use model::{ForwardCache, Model, ModelConfig};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use train::{train_step, StepRecord, TrainConfig, Trainer};
