//! One-dimensional "return dial": the action directly sets the per-step reward,
//! so every episode return in `[0, H]` is reachable.

use serde::{Deserialize, Serialize};

use super::{Environment, EpisodeEnd, SimRng, StepOutcome};
use crate::error::{Error, Result};
use crate::trajectory::{ActionKind, ModalityDims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialSpec {
    pub horizon: usize,
}

impl Default for DialSpec {
    fn default() -> Self {
        Self { horizon: 20 }
    }
}

/// Per-step reward for action `a` (clipped to `[-1, 1]`).
pub fn dial_reward(a: f64) -> f64 {
    (a.clamp(-1.0, 1.0) + 1.0) / 2.0
}

#[derive(Debug, Clone)]
pub struct DialEnv {
    spec: DialSpec,
    t: usize,
    cumulative: f64,
}

impl DialEnv {
    pub fn new(spec: DialSpec) -> Self {
        Self {
            spec,
            t: 0,
            cumulative: 0.0,
        }
    }

    fn observe(&self) -> Vec<f64> {
        let h = self.spec.horizon.max(1) as f64;
        vec![self.t as f64 / h, self.cumulative]
    }
}

impl Environment for DialEnv {
    fn env_id(&self) -> String {
        "dial".into()
    }

    fn dims(&self) -> ModalityDims {
        ModalityDims {
            state_dim: 2,
            action_dim: 1,
            action_kind: ActionKind::Continuous,
        }
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
        self.t = 0;
        self.cumulative = 0.0;
        self.observe()
    }

    fn step(&mut self, action: &[f64], _rng: &mut SimRng) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::usage("dial episode already finished"));
        }
        if action.len() != 1 || !action[0].is_finite() {
            return Err(Error::usage(format!("dial expects one finite action, got {action:?}")));
        }
        let reward = dial_reward(action[0]);
        self.t += 1;
        self.cumulative += reward;
        let done = self.is_done();
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            done,
            end: done.then_some(EpisodeEnd::Horizon),
        })
    }

    fn is_done(&self) -> bool {
        self.t >= self.spec.horizon
    }
}
