//! Discrete Markov-bridge models for refining a deterministic prior
//! sequence into a target sequence.
//!
//! A position-wise encoder maps condition features to a prior token
//! sequence `x`; a pinned categorical bridge then carries `x` to the target
//! `y` in `T` steps, and a learned approximator `phi(z_t, s, t)` lets the
//! bridge be simulated when `y` is unknown.

#![allow(clippy::needless_range_loop)]

pub mod approximator;
pub mod bridge;
pub mod checkpoint;
mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod optim;
pub mod oracle;
pub mod prior;
pub mod sampler;
pub mod seeding;
pub mod sequence;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use sequence::TokenSequence;
