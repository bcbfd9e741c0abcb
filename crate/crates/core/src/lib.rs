//! Imitation of interaction skills from sparse, noisy demonstrations.
//!
//! Demonstrations are stitched into a graph of skill transitions, start
//! states are sampled around it with adaptive difficulty weighting, and a
//! policy conditioned on a learned history embedding is trained with PPO
//! against an imitation reward.

pub mod ats;
pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod policy;
pub mod reward;
pub mod trainer;
pub mod trajectory;
pub mod world;

pub use error::{Error, Result};
