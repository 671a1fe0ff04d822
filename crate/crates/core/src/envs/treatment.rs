//! Procedurally generated treatment POMDP.
//!
//! Hidden state: `n_s` disease states plus two absorbing outcomes, remission
//! and adverse event. A treatment `a` scales the base disease graph row by its
//! modulation vector `m_a` and renormalizes, after reserving probability mass
//! for remission and adverse events:
//!
//! ```text
//! T(s_j | s_i, a) = (1 - T(s_r | s_i, a) - T(s_a | s_i, a)) * m_a[j] T[i][j] / sum_k m_a[k] T[i][k]
//! ```
//!
//! Observations are `clip(expit(o~ + delta_a), 0, 1)` with `o~` drawn from a
//! state-dependent isotropic Gaussian. The adverse-event probability grows by
//! `adverse_per_violation` for every symptom that is already above the danger
//! line `1 - kappa/2` and that the chosen treatment pushes further up.
//!
//! Rewards: `r_r` on remission, `-r_r` on an adverse event, otherwise
//! `-c_a - c_o * sum(o)` on the freshly emitted observation.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Environment, EpisodeEnd, SimRng, StepOutcome};
use crate::error::{Error, Result};
use crate::trajectory::{ActionKind, ModalityDims};

/// Tolerance on row sums of stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Index of remission in a full transition row.
pub const REMISSION: usize = 0;
/// Index of the adverse event in a full transition row.
pub const ADVERSE: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    /// Row-stochastic disease graph, `n_states x n_states`.
    pub base_transition: Vec<Vec<f64>>,
    /// Positive modulation vectors, `n_actions x n_states`.
    pub modulation: Vec<Vec<f64>>,
    /// `T(s_r | s_i, a)`, `n_states x n_actions`.
    pub remission: Vec<Vec<f64>>,
    /// Baseline `T(s_a | s_i, a)`, `n_states x n_actions`.
    pub adverse: Vec<Vec<f64>>,
    /// Extra adverse probability per aggravated dangerous symptom.
    pub adverse_per_violation: f64,
    /// Per-state observation means in logit space, `n_states x obs_dim`.
    pub obs_mean: Vec<Vec<f64>>,
    pub obs_std: f64,
    /// Symptom shifts `delta_a`, `n_actions x obs_dim`.
    pub symptom_shift: Vec<Vec<f64>>,
    pub remission_reward: f64,
    pub treatment_cost: f64,
    pub symptom_cost: f64,
    pub danger_threshold: f64,
    pub max_steps: usize,
}

/// Knobs for procedural generation.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentGenConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub danger_threshold: f64,
    pub remission_reward: f64,
    pub treatment_cost: f64,
    pub symptom_cost: f64,
    pub max_steps: usize,
}

impl Default for TreatmentGenConfig {
    fn default() -> Self {
        Self {
            n_states: 8,
            n_actions: 6,
            obs_dim: 8,
            danger_threshold: 0.6,
            remission_reward: 16.0,
            treatment_cost: 1.0,
            symptom_cost: 0.2,
            max_steps: 8,
        }
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TreatmentSpec {
    pub fn generate(seed: u64) -> Result<Self> {
        Self::generate_with(seed, &TreatmentGenConfig::default())
    }

    /// Instantiates a fresh disease graph, symptom model and treatment set
    /// from `seed`. Stronger treatments have higher remission odds, higher
    /// adverse odds and more symptom-raising side effects.
    pub fn generate_with(seed: u64, cfg: &TreatmentGenConfig) -> Result<Self> {
        let ns = cfg.n_states;
        let na = cfg.n_actions;
        let d = cfg.obs_dim;
        if ns < 2 || na < 1 || d < 1 {
            return Err(Error::Spec(format!(
                "need n_states >= 2, n_actions >= 1, obs_dim >= 1 (got {ns}, {na}, {d})"
            )));
        }
        let mut rng = SimRng::seed_from_u64(seed);

        let mut base_transition = vec![vec![0.0; ns]; ns];
        for (i, row) in base_transition.iter_mut().enumerate() {
            row[i] += 1.0 + rng.random::<f64>();
            row[(i + 1) % ns] += 0.2 + 0.8 * rng.random::<f64>();
            row[(i + ns - 1) % ns] += 0.2 + 0.8 * rng.random::<f64>();
            let extra = rng.random_range(0..ns);
            row[extra] += 0.5 * rng.random::<f64>();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }

        let lognormal = Normal::<f64>::new(0.0, 0.5).expect("valid normal");
        let modulation = (0..na)
            .map(|_| (0..ns).map(|_| lognormal.sample(&mut rng).exp()).collect())
            .collect();

        let strength: Vec<f64> = (0..na).map(|_| 0.15 + 0.85 * rng.random::<f64>()).collect();
        let mut remission = vec![vec![0.0; na]; ns];
        let mut adverse = vec![vec![0.0; na]; ns];
        for i in 0..ns {
            for a in 0..na {
                remission[i][a] = 0.3 * strength[a] * (0.3 + 0.7 * rng.random::<f64>());
                adverse[i][a] = 0.06 * strength[a] * (0.5 + 0.5 * rng.random::<f64>());
            }
        }

        let obs_mean = (0..ns)
            .map(|_| {
                (0..d)
                    .map(|_| -0.8 + 1.2 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();

        let symptom_shift = (0..na)
            .map(|a| {
                (0..d)
                    .map(|_| {
                        if rng.random::<f64>() < 0.35 {
                            let magnitude = 0.3 + 0.9 * rng.random::<f64>();
                            if rng.random::<f64>() < 0.2 + 0.6 * strength[a] {
                                magnitude
                            } else {
                                -magnitude
                            }
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();

        let spec = Self {
            seed,
            n_states: ns,
            n_actions: na,
            obs_dim: d,
            base_transition,
            modulation,
            remission,
            adverse,
            adverse_per_violation: 0.15,
            obs_mean,
            obs_std: 0.5,
            symptom_shift,
            remission_reward: cfg.remission_reward,
            treatment_cost: cfg.treatment_cost,
            symptom_cost: cfg.symptom_cost,
            danger_threshold: cfg.danger_threshold,
            max_steps: cfg.max_steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn adverse_reward(&self) -> f64 {
        -self.remission_reward
    }

    /// Symptom level at or above which a symptom counts as dangerous.
    pub fn danger_line(&self) -> f64 {
        1.0 - self.danger_threshold / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na, d) = (self.n_states, self.n_actions, self.obs_dim);
        let shape_ok = self.base_transition.len() == ns
            && self.base_transition.iter().all(|r| r.len() == ns)
            && self.modulation.len() == na
            && self.modulation.iter().all(|r| r.len() == ns)
            && self.remission.len() == ns
            && self.remission.iter().all(|r| r.len() == na)
            && self.adverse.len() == ns
            && self.adverse.iter().all(|r| r.len() == na)
            && self.obs_mean.len() == ns
            && self.obs_mean.iter().all(|r| r.len() == d)
            && self.symptom_shift.len() == na
            && self.symptom_shift.iter().all(|r| r.len() == d);
        if !shape_ok {
            return Err(Error::Spec("array shapes disagree with n_states/n_actions/obs_dim".into()));
        }
        for (i, row) in self.base_transition.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Spec(format!("negative base transition in row {i}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Spec(format!("base transition row {i} sums to {s}")));
            }
        }
        if self
            .modulation
            .iter()
            .flatten()
            .any(|m| !(*m > 0.0) || !m.is_finite())
        {
            return Err(Error::Spec("modulation vectors must be positive".into()));
        }
        for i in 0..ns {
            for a in 0..na {
                let (r, ad) = (self.remission[i][a], self.adverse[i][a]);
                if !(r >= 0.0) || !(ad >= 0.0) || r + ad > 1.0 + ROW_SUM_TOL {
                    return Err(Error::Spec(format!(
                        "terminal probabilities ({r}, {ad}) invalid for state {i}, action {a}"
                    )));
                }
                self.modulated_norm(i, a)?;
            }
        }
        if !(self.remission_reward > 0.0) {
            return Err(Error::Spec("remission reward must be positive".into()));
        }
        if !(self.obs_std >= 0.0) || !(self.adverse_per_violation >= 0.0) {
            return Err(Error::Spec("obs_std and adverse_per_violation must be nonnegative".into()));
        }
        Ok(())
    }

    fn modulated_norm(&self, s: usize, a: usize) -> Result<f64> {
        let norm: f64 = (0..self.n_states)
            .map(|k| self.modulation[a][k] * self.base_transition[s][k])
            .sum();
        if !(norm > 0.0) {
            return Err(Error::Spec(format!(
                "degenerate modulation for state {s}, action {a}"
            )));
        }
        Ok(norm)
    }

    fn check_indices(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::usage(format!(
                "state {s} / action {a} out of range ({} states, {} actions)",
                self.n_states, self.n_actions
            )));
        }
        Ok(())
    }

    /// Number of dangerous symptoms in `obs` that treatment `a` would raise.
    pub fn violations(&self, obs: &[f64], a: usize) -> usize {
        let line = self.danger_line();
        obs.iter()
            .zip(&self.symptom_shift[a])
            .filter(|(o, shift)| **o >= line && **shift > 0.0)
            .count()
    }

    /// Full next-state distribution `[s_r, s_a, s_1, ..., s_ns]` with the
    /// baseline adverse probability.
    pub fn transition_row(&self, s: usize, a: usize) -> Result<Vec<f64>> {
        self.check_indices(s, a)?;
        self.row_with_adverse(s, a, self.adverse[s][a])
    }

    /// Same as [`transition_row`](Self::transition_row) with the adverse
    /// probability raised by the symptoms visible in `obs`.
    pub fn transition_row_given_obs(&self, s: usize, a: usize, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_indices(s, a)?;
        let p_r = self.remission[s][a];
        let raised = self.adverse[s][a] + self.adverse_per_violation * self.violations(obs, a) as f64;
        self.row_with_adverse(s, a, raised.min(1.0 - p_r))
    }

    fn row_with_adverse(&self, s: usize, a: usize, p_a: f64) -> Result<Vec<f64>> {
        let p_r = self.remission[s][a];
        let norm = self.modulated_norm(s, a)?;
        let keep = (1.0 - p_r - p_a).max(0.0);
        let mut row = Vec::with_capacity(self.n_states + 2);
        row.push(p_r);
        row.push(p_a);
        for j in 0..self.n_states {
            row.push(keep * self.modulation[a][j] * self.base_transition[s][j] / norm);
        }
        Ok(row)
    }

    /// Stationary distribution of the base disease graph (power iteration).
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.n_states;
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n];
            for (i, p) in pi.iter().enumerate() {
                for (j, q) in self.base_transition[i].iter().enumerate() {
                    next[j] += p * q;
                }
            }
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }

    pub fn sample_observation(&self, s: usize, shift: Option<usize>, rng: &mut SimRng) -> Vec<f64> {
        (0..self.obs_dim)
            .map(|i| {
                let noise: f64 = rng.sample(StandardNormal);
                let base = self.obs_mean[s][i] + self.obs_std * noise;
                let delta = shift.map_or(0.0, |a| self.symptom_shift[a][i]);
                expit(base + delta).clamp(0.0, 1.0)
            })
            .collect()
    }
}

fn sample_index(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack lands on the last nonzero entry
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone)]
pub struct TreatmentEnv {
    spec: TreatmentSpec,
    stationary: Vec<f64>,
    hidden: usize,
    obs: Vec<f64>,
    t: usize,
    finished: bool,
}

impl TreatmentEnv {
    pub fn new(spec: TreatmentSpec) -> Result<Self> {
        spec.validate()?;
        let stationary = spec.stationary();
        let d = spec.obs_dim;
        Ok(Self {
            spec,
            stationary,
            hidden: 0,
            obs: vec![0.0; d],
            t: 0,
            finished: true,
        })
    }

    pub fn spec(&self) -> &TreatmentSpec {
        &self.spec
    }

    pub fn hidden_state(&self) -> usize {
        self.hidden
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }
}

impl Environment for TreatmentEnv {
    fn env_id(&self) -> String {
        format!("treatment:{}", self.spec.seed)
    }

    fn dims(&self) -> ModalityDims {
        ModalityDims {
            state_dim: self.spec.obs_dim,
            action_dim: self.spec.n_actions,
            action_kind: ActionKind::Discrete,
        }
    }

    fn horizon(&self) -> usize {
        self.spec.max_steps
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.hidden = sample_index(&self.stationary, rng);
        self.obs = self.spec.sample_observation(self.hidden, None, rng);
        self.t = 0;
        self.finished = self.spec.max_steps == 0;
        self.obs.clone()
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::usage("treatment episode already finished"));
        }
        self.dims().check_action(action)?;
        let a = action[0] as usize;
        let row = self
            .spec
            .transition_row_given_obs(self.hidden, a, &self.obs)?;
        let next = sample_index(&row, rng);
        self.t += 1;
        let (reward, end) = match next {
            REMISSION => {
                // terminal observation is drawn from the last disease state
                self.obs = self.spec.sample_observation(self.hidden, Some(a), rng);
                (self.spec.remission_reward, Some(EpisodeEnd::Remission))
            }
            ADVERSE => {
                self.obs = self.spec.sample_observation(self.hidden, Some(a), rng);
                (self.spec.adverse_reward(), Some(EpisodeEnd::Adverse))
            }
            j => {
                self.hidden = j - 2;
                self.obs = self.spec.sample_observation(self.hidden, Some(a), rng);
                let symptoms: f64 = self.obs.iter().sum();
                let r = -self.spec.treatment_cost - self.spec.symptom_cost * symptoms;
                let end = (self.t >= self.spec.max_steps).then_some(EpisodeEnd::Horizon);
                (r, end)
            }
        };
        self.finished = end.is_some();
        Ok(StepOutcome {
            observation: self.obs.clone(),
            reward,
            done: self.finished,
            end,
        })
    }

    fn is_done(&self) -> bool {
        self.finished
    }
}
