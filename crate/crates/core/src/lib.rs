//! Robust reinforcement learning against temporally-coupled adversaries,
//! framed as a two-player zero-sum game and solved by double oracle.

pub mod adversaries;
pub mod engine;
pub mod error;
pub mod eval;
pub mod mdp;
pub mod meta_game;
pub mod nn;
pub mod oracle;
pub mod perturb;
pub mod rng;
pub mod rollout;

pub use error::{Error, Result};
