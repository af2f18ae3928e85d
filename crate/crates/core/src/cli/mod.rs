//! Command-line orchestration: configuration, dataset generation, two-stage
//! training, evaluation, tokenizer benchmarking and post-tuning.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_posttune, cmd_tok_bench, cmd_train_bc, cmd_train_sacbc, gen_data, EvalMode,
};
pub use config::RunConfig;
