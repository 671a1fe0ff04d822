//! Target-conditioned episodes in a simulator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::select::{boltzmann_select, double_check_select, propose_candidates, sample_returns};
use crate::envs::{EpisodeEnd, Environment, SimRng};
use crate::error::{Error, Result};
use crate::io::StepAudit;
use crate::model::{slot, MaskedSequence, Modality, Network, Scalar};
use crate::trajectory::{update_target_return, ModalityDims, SubTrajectory, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum Selection {
    /// Nearest predicted value to the running target.
    DoubleCheck,
    /// Sample from `softmax(beta * q)`.
    Boltzmann { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Candidates per decision.
    pub n_candidates: usize,
    /// Half-width of the return ball the candidates are drawn from.
    pub delta: f64,
    pub gamma: f64,
    pub selection: Selection,
    /// Re-score each candidate with its proposed action written into the window.
    pub rescore: bool,
}

impl InferConfig {
    /// `N = 300`, `delta = 0.05 r_max`, nearest-value selection.
    pub fn for_dataset(r_max: f64, gamma: f64) -> Self {
        Self {
            n_candidates: 300,
            delta: 0.05 * r_max.abs(),
            gamma,
            selection: Selection::DoubleCheck,
            rescore: false,
        }
    }

    /// Single candidate at the exact target: plain return conditioning.
    pub fn conditioning_only(gamma: f64) -> Self {
        Self {
            n_candidates: 1,
            delta: 0.0,
            gamma,
            selection: Selection::DoubleCheck,
            rescore: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::usage("candidate count must be at least 1"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::usage(format!("return radius {} must be >= 0", self.delta)));
        }
        if let Selection::Boltzmann { beta } = self.selection {
            if !(beta >= 0.0) {
                return Err(Error::usage(format!("temperature {beta} must be >= 0")));
            }
        }
        crate::trajectory::check_gamma(self.gamma)
    }
}

/// What the agent has seen so far in the current episode.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub targets: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl History {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Window of the last `k` steps ending with the current decision: the
    /// current state and target, a placeholder action and reward. Earlier
    /// steps carry the running targets in force when they were taken.
    pub fn window(&self, state: &[f64], target: f64, k: usize, dims: ModalityDims) -> SubTrajectory {
        let n_real = (self.len() + 1).min(k);
        let n_pad = k - n_real;
        let placeholder = vec![0.0; dims.stored_action_width()];
        let first = self.len() + 1 - n_real;
        let mut w = SubTrajectory {
            returns: vec![0.0; n_pad],
            states: vec![vec![0.0; state.len()]; n_pad],
            actions: vec![placeholder.clone(); n_pad],
            rewards: vec![0.0; n_pad],
            pad: vec![true; n_pad],
            start: first,
            ends_episode: false,
        };
        for t in first..self.len() {
            w.returns.push(self.targets[t]);
            w.states.push(self.states[t].clone());
            w.actions.push(self.actions[t].clone());
            w.rewards.push(self.rewards[t]);
            w.pad.push(false);
        }
        w.returns.push(target);
        w.states.push(state.to_vec());
        w.actions.push(placeholder);
        w.rewards.push(0.0);
        w.pad.push(false);
        w
    }

    fn push(&mut self, target: f64, state: Vec<f64>, action: Vec<f64>, reward: f64) {
        self.targets.push(target);
        self.states.push(state);
        self.actions.push(action);
        self.rewards.push(reward);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub audit: StepAudit,
    pub end: Option<EpisodeEnd>,
}

impl Rollout {
    /// Undiscounted sum of rewards.
    pub fn achieved(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn to_trajectory(&self, gamma: f64) -> Result<Option<Trajectory>> {
        if self.is_empty() {
            return Ok(None);
        }
        Trajectory::new(self.states.clone(), self.actions.clone(), self.rewards.clone(), gamma).map(Some)
    }
}

fn check_dims<F: Scalar>(net: &Network<F>, env: &dyn Environment) -> Result<()> {
    let (a, b) = (net.config.dims(), env.dims());
    if a != b {
        return Err(Error::usage(format!("model dims {a:?} do not match environment dims {b:?}")));
    }
    Ok(())
}

/// One episode under the candidate-and-check policy. The environment draws
/// from `env_rng`, candidate sampling and Boltzmann choices from `rng`.
pub fn rollout_aligned<F: Scalar, R: Rng + ?Sized>(
    env: &mut dyn Environment,
    net: &Network<F>,
    target: f64,
    cfg: &InferConfig,
    env_rng: &mut SimRng,
    rng: &mut R,
) -> Result<Rollout> {
    cfg.validate()?;
    check_dims(net, env)?;
    let k = net.config.context_len;
    let dims = env.dims();
    let mut obs = env.reset(env_rng);
    let mut hist = History::default();
    let mut audit = StepAudit { targets: vec![], selected_q: vec![], candidate_index: vec![] };
    let mut end = None;
    let mut r_t = target;
    while !env.is_done() {
        let window = hist.window(&obs, r_t, k, dims);
        let samples = sample_returns(r_t, cfg.delta, cfg.n_candidates, rng);
        let cands = propose_candidates(net, &window, &samples, cfg.rescore)?;
        let idx = match cfg.selection {
            Selection::DoubleCheck => double_check_select(&cands.q, r_t)?,
            Selection::Boltzmann { beta } => boltzmann_select(&cands.q, beta, rng)?,
        };
        let action = cands.actions[idx].clone();
        let out = env.step(&action, env_rng)?;
        audit.targets.push(r_t);
        audit.selected_q.push(cands.q[idx]);
        audit.candidate_index.push(idx);
        let state = std::mem::replace(&mut obs, out.observation);
        hist.push(r_t, state, action, out.reward);
        end = out.end;
        r_t = update_target_return(r_t, out.reward, cfg.gamma)?;
    }
    Ok(Rollout {
        states: hist.states,
        actions: hist.actions,
        rewards: hist.rewards,
        audit,
        end,
    })
}

/// Action from plain return conditioning: one forward pass with the target
/// in the current return token and the current action token masked. The
/// value estimate from the same pass is returned alongside.
pub fn conditioned_action<F: Scalar>(net: &Network<F>, window: &SubTrajectory) -> Result<(Vec<f64>, f64)> {
    let k = window.context_len();
    let mut mask = vec![false; 3 * k];
    mask[slot(k - 1, Modality::Action)] = true;
    let seq = MaskedSequence::new(window.clone(), mask)?;
    let out = net.forward_heads(std::slice::from_ref(&seq))?;
    Ok((out.action_choice(&net.config, 0, k - 1), out.q_raw(&net.config, 0, k - 1)))
}

/// Episode driven by [`conditioned_action`] alone, with no value check.
pub fn rollout_conditioned<F: Scalar>(
    env: &mut dyn Environment,
    net: &Network<F>,
    target: f64,
    gamma: f64,
    env_rng: &mut SimRng,
) -> Result<Rollout> {
    check_dims(net, env)?;
    let k = net.config.context_len;
    let dims = env.dims();
    let mut obs = env.reset(env_rng);
    let mut hist = History::default();
    let mut audit = StepAudit { targets: vec![], selected_q: vec![], candidate_index: vec![] };
    let mut end = None;
    let mut r_t = target;
    while !env.is_done() {
        let window = hist.window(&obs, r_t, k, dims);
        let (action, q) = conditioned_action(net, &window)?;
        let out = env.step(&action, env_rng)?;
        audit.targets.push(r_t);
        audit.selected_q.push(q);
        audit.candidate_index.push(0);
        let state = std::mem::replace(&mut obs, out.observation);
        hist.push(r_t, state, action, out.reward);
        end = out.end;
        r_t = update_target_return(r_t, out.reward, gamma)?;
    }
    Ok(Rollout {
        states: hist.states,
        actions: hist.actions,
        rewards: hist.rewards,
        audit,
        end,
    })
}
