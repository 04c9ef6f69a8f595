//! Hierarchical reinforcement learning with options on sparse-reward, goal-conditioned tasks.
//!
//! * [`env`]: point-mass reach and push environments
//! * [`nn`]: dense networks with exact gradients, Adam, gradient checking
//! * [`agent`]: the multi-updates option-critic agent
//! * [`hindsight`]: HER and dual-objective (2HER) relabeling
//! * [`trainer`]: configuration, the training loop and metrics

pub mod agent;
pub mod env;
pub mod error;
pub mod hindsight;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
