//! Discrete-token autoregressive driving planner.

pub mod armodel;
pub mod bevq;
pub mod cli;
pub mod error;
pub mod kinematics;
pub mod pipeline;
pub mod posttune;
pub mod rl;
pub mod seeding;
pub mod simworld;
pub mod tokenize;

pub use error::{DapError, Result};
