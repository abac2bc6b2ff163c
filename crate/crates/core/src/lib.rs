//! Representation learning with discrete and variational information
//! bottlenecks on top of self-supervised RL objectives.
//!
//! The pieces, bottom-up:
//!
//! * [`bottleneck`]: Gaussian VIB layer and grouped vector quantization.
//! * [`objectives`]: pluggable self-supervised losses (prototype, inverse
//!   dynamics, temporal contrastive) behind a name registry, plus the DQN
//!   critic loss.
//! * [`exploration`]: k-nearest-neighbour intrinsic reward over discretized
//!   embeddings.
//! * [`envs`]: 6x6 maze tasks with optional exogenous observation noise.
//! * [`pipeline`]: replay, run configuration, and the three-stage
//!   pretrain / pretrain / fine-tune trainer with checkpoints.
//! * [`metrics`]: coverage, codebook health, distance maps, embedding export.

pub mod bottleneck;
pub mod envs;
mod error;
pub mod exploration;
pub mod metrics;
pub mod objectives;
pub mod pipeline;

pub use error::{Error, Result};
pub use numcore;

/// Seedable generator used for every random stream in the crate.
pub type SeedRng = rand_chacha::ChaCha8Rng;
