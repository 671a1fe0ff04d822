//! Finite-horizon chain MDP with a known model and exact optimal action-values.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::treatment::ROW_SUM_TOL;
use super::{Environment, EpisodeEnd, SimRng, StepOutcome};
use crate::error::{Error, Result};
use crate::trajectory::{ActionKind, ModalityDims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Expected immediate reward `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    pub horizon: usize,
    pub start: usize,
}

impl ChainSpec {
    /// Left/right chain: the intended move succeeds with probability 3/4,
    /// otherwise the agent stays. The right end pays 1 per step, pushing left
    /// at the left end pays 1/4.
    pub fn standard(n_states: usize, horizon: usize) -> Self {
        let n = n_states.max(2);
        let mut transitions = vec![vec![vec![0.0; n]; 2]; n];
        let mut rewards = vec![vec![0.0; 2]; n];
        for s in 0..n {
            let left = s.saturating_sub(1);
            let right = (s + 1).min(n - 1);
            transitions[s][0][left] += 0.75;
            transitions[s][0][s] += 0.25;
            transitions[s][1][right] += 0.75;
            transitions[s][1][s] += 0.25;
        }
        rewards[n - 1] = vec![1.0, 1.0];
        rewards[0][0] = 0.25;
        Self {
            n_states: n,
            n_actions: 2,
            transitions,
            rewards,
            horizon,
            start: n / 2,
        }
    }

    /// Random local chain with dyadic probabilities (quarters) and rewards
    /// (eighths), so that value computations are exact in binary floating point.
    pub fn random(seed: u64, n_states: usize, n_actions: usize, horizon: usize) -> Self {
        let mut rng = SimRng::seed_from_u64(seed);
        let n = n_states.max(1);
        let mut transitions = vec![vec![vec![0.0; n]; n_actions]; n];
        let mut rewards = vec![vec![0.0; n_actions]; n];
        for s in 0..n {
            for a in 0..n_actions {
                for _ in 0..4 {
                    let offset = rng.random_range(0..3usize);
                    let next = (s + offset).saturating_sub(1).min(n - 1);
                    transitions[s][a][next] += 0.25;
                }
                rewards[s][a] = rng.random_range(0..9u32) as f64 / 8.0;
            }
        }
        Self {
            n_states: n,
            n_actions,
            transitions,
            rewards,
            horizon,
            start: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || !(2..=3).contains(&self.n_actions) {
            return Err(Error::Spec(format!(
                "chain needs >= 1 state and 2-3 actions (got {}, {})",
                self.n_states, self.n_actions
            )));
        }
        if self.start >= self.n_states {
            return Err(Error::Spec("start state out of range".into()));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = &self.transitions[s][a];
                let total: f64 = row.iter().sum();
                if row.len() != self.n_states || (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Spec(format!("transition row ({s}, {a}) invalid")));
                }
            }
        }
        Ok(())
    }
}

/// Optimal finite-horizon action-values, indexed `[steps_elapsed][state][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub q: Vec<Vec<Vec<f64>>>,
}

impl QTable {
    pub fn value(&self, step: usize, s: usize) -> f64 {
        self.q[step][s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action, lowest index on ties.
    pub fn greedy(&self, step: usize, s: usize) -> usize {
        let row = &self.q[step][s];
        let mut best = 0;
        for (a, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = a;
            }
        }
        best
    }
}

/// Backward induction: `Q_h(s,a) = R(s,a) + sum_s' P(s'|s,a) max_a' Q_{h+1}(s',a')`.
pub fn value_iteration(spec: &ChainSpec) -> QTable {
    let (n, na, h) = (spec.n_states, spec.n_actions, spec.horizon);
    let mut q = vec![vec![vec![0.0; na]; n]; h];
    let mut next_value = vec![0.0; n];
    for step in (0..h).rev() {
        for s in 0..n {
            for a in 0..na {
                let mut v = spec.rewards[s][a];
                for (s2, p) in spec.transitions[s][a].iter().enumerate() {
                    if *p != 0.0 {
                        v += p * next_value[s2];
                    }
                }
                q[step][s][a] = v;
            }
        }
        for s in 0..n {
            next_value[s] = q[step][s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    QTable { q }
}

#[derive(Debug, Clone)]
pub struct ChainEnv {
    spec: ChainSpec,
    state: usize,
    t: usize,
}

impl ChainEnv {
    pub fn new(spec: ChainSpec) -> Result<Self> {
        spec.validate()?;
        let state = spec.start;
        Ok(Self { spec, state, t: 0 })
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn state_index(&self) -> usize {
        self.state
    }

    pub fn steps_elapsed(&self) -> usize {
        self.t
    }

    fn observe(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.spec.n_states + 1];
        v[self.state] = 1.0;
        v[self.spec.n_states] = self.t as f64 / self.spec.horizon.max(1) as f64;
        v
    }
}

impl Environment for ChainEnv {
    fn env_id(&self) -> String {
        "chain".into()
    }

    fn dims(&self) -> ModalityDims {
        ModalityDims {
            state_dim: self.spec.n_states + 1,
            action_dim: self.spec.n_actions,
            action_kind: ActionKind::Discrete,
        }
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
        self.state = self.spec.start;
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::usage("chain episode already finished"));
        }
        self.dims().check_action(action)?;
        let a = action[0] as usize;
        let reward = self.spec.rewards[self.state][a];
        let row = &self.spec.transitions[self.state][a];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = row.iter().rposition(|p| *p > 0.0).unwrap_or(self.state);
        for (s2, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = s2;
                break;
            }
        }
        self.state = next;
        self.t += 1;
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
