//! Online fine-tuning: Boltzmann exploration toward the best return seen so
//! far, interleaved with gradient updates on a growing replay buffer.

use serde::{Deserialize, Serialize};

use super::rollout::{rollout_aligned, InferConfig, Selection};
use crate::behavior::keep_top_returns;
use crate::envs::EnvSpec;
use crate::error::Result;
use crate::model::Scalar;
use crate::rng::rng_for;
use crate::train::Trainer;
use crate::trajectory::Dataset;

const FINETUNE_STREAM: u64 = 0xf17e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Interaction budget in episodes.
    pub episodes: usize,
    pub updates_per_episode: usize,
    /// Share of the offline data (by return rank) that seeds the buffer.
    pub keep_percent: f64,
    pub beta: f64,
    /// Return-ball radius as a multiple of the buffer's best return.
    pub delta_factor: f64,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            updates_per_episode: 200,
            keep_percent: 5.0,
            beta: 100.0,
            delta_factor: 2.0,
            n_candidates: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub initial_buffer: usize,
    /// Buffer size after each episode.
    pub buffer_sizes: Vec<usize>,
    pub targets: Vec<f64>,
    pub episode_returns: Vec<f64>,
}

pub fn online_finetune<F: Scalar>(
    env_spec: &EnvSpec,
    trainer: &mut Trainer<F>,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let mut buffer = keep_top_returns(dataset, cfg.keep_percent)?;
    let mut env = env_spec.build()?;
    let mut report = FinetuneReport {
        initial_buffer: buffer.len(),
        ..Default::default()
    };
    for ep in 0..cfg.episodes {
        let target = buffer.r_max;
        let infer = InferConfig {
            n_candidates: cfg.n_candidates,
            delta: cfg.delta_factor * target.abs(),
            gamma: dataset.gamma,
            selection: Selection::Boltzmann { beta: cfg.beta },
            rescore: false,
        };
        let mut env_rng = rng_for(cfg.seed, &[FINETUNE_STREAM, ep as u64, 0]);
        let mut rng = rng_for(cfg.seed, &[FINETUNE_STREAM, ep as u64, 1]);
        let roll = rollout_aligned(env.as_mut(), &trainer.net, target, &infer, &mut env_rng, &mut rng)?;
        report.targets.push(target);
        report.episode_returns.push(roll.achieved());
        if let Some(traj) = roll.to_trajectory(dataset.gamma)? {
            let mut trajs = buffer.trajectories.clone();
            trajs.push(traj);
            buffer = buffer.with_trajectories(trajs);
        }
        report.buffer_sizes.push(buffer.len());
        for _ in 0..cfg.updates_per_episode {
            trainer.step_on(&buffer)?;
        }
    }
    Ok(report)
}
