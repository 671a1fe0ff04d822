//! Decision-time candidate checking, aligned rollouts and online fine-tuning.

pub mod finetune;
pub mod rollout;
pub mod select;

pub use finetune::{online_finetune, FinetuneConfig, FinetuneReport};
pub use rollout::{conditioned_action, rollout_aligned, rollout_conditioned, History, InferConfig, Rollout, Selection};
pub use select::{boltzmann_probs, boltzmann_select, double_check_select, propose_candidates, sample_returns, CandidateSet};
