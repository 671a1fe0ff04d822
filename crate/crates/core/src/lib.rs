//! Target-return-aligned offline reinforcement learning.
//!
//! A bidirectional encoder-decoder transformer reconstructs masked
//! (return, state, action) sequences and carries one expectile-trained
//! Q head per timestep. At decision time the policy samples candidate
//! returns around the requested target, proposes one action per candidate
//! and keeps the action whose predicted value lands closest to the target.

pub mod behavior;
pub mod cli;
pub mod config;
pub mod envs;
pub mod error;
pub mod eval;
pub mod infer;
pub mod io;
pub mod model;
pub mod rng;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{
    compute_returns, update_target_return, ActionKind, Dataset, ModalityDims, SubTrajectory,
    Trajectory,
};
