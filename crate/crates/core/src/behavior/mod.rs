//! Behavior policies, offline dataset collection and return-based filtering.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::envs::{value_iteration, EnvSpec, Environment, QTable, SimRng};
use crate::error::{Error, Result};
use crate::trajectory::{Dataset, Trajectory};

pub mod soc;

pub use soc::SocPolicy;

/// Which behavior policy to roll out, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    /// Standard-of-care clinician (treatment env only).
    Soc { alpha: f64, epsilon: f64 },
    /// Per-episode constant bias `b ~ U[-1, 1]` plus Gaussian jitter (dial only).
    Mixture { sigma: f64 },
    /// Epsilon-greedy around a competent controller (chain, maze, dial).
    EpsGreedy { epsilon: f64 },
}

impl PolicySpec {
    pub fn default_for(env: &EnvSpec) -> Self {
        match env {
            EnvSpec::Dial(_) => PolicySpec::Mixture { sigma: 0.1 },
            EnvSpec::Treatment(_) => PolicySpec::Soc {
                alpha: 0.25,
                epsilon: 0.0,
            },
            EnvSpec::Maze(_) | EnvSpec::Chain(_) => PolicySpec::EpsGreedy { epsilon: 0.3 },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::Soc { .. } => "soc",
            PolicySpec::Mixture { .. } => "mixture",
            PolicySpec::EpsGreedy { .. } => "epsgreedy",
        }
    }
}

/// Per-episode action source.
pub trait BehaviorPolicy {
    fn begin_episode(&mut self, rng: &mut SimRng);
    fn act(&mut self, obs: &[f64], rng: &mut SimRng) -> Vec<f64>;
    fn observe(&mut self, _action: &[f64], _reward: f64) {}
}

/// Dial mixture: one constant bias per episode with per-step jitter.
#[derive(Debug, Clone)]
pub struct DialMixture {
    pub sigma: f64,
    bias: f64,
}

impl DialMixture {
    pub fn new(sigma: f64) -> Self {
        Self { sigma, bias: 0.0 }
    }
}

impl BehaviorPolicy for DialMixture {
    fn begin_episode(&mut self, rng: &mut SimRng) {
        self.bias = rng.random_range(-1.0..=1.0);
    }

    fn act(&mut self, _obs: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let jitter: f64 = rng.sample(StandardNormal);
        vec![(self.bias + self.sigma * jitter).clamp(-1.0, 1.0)]
    }
}

/// Epsilon-greedy on the chain's exact optimal values.
#[derive(Debug, Clone)]
pub struct ChainEpsGreedy {
    pub epsilon: f64,
    q: QTable,
    n_states: usize,
    horizon: usize,
}

impl BehaviorPolicy for ChainEpsGreedy {
    fn begin_episode(&mut self, _rng: &mut SimRng) {}

    fn act(&mut self, obs: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let n_actions = self.q.q.first().map_or(2, |q| q[0].len());
        if rng.random::<f64>() < self.epsilon {
            return vec![rng.random_range(0..n_actions) as f64];
        }
        let s = (0..self.n_states)
            .max_by(|a, b| obs[*a].total_cmp(&obs[*b]))
            .unwrap_or(0);
        let step = ((obs[self.n_states] * self.horizon as f64).round() as usize)
            .min(self.horizon.saturating_sub(1));
        vec![self.q.greedy(step, s) as f64]
    }
}

/// Waypoint-following PD controller for the maze with random-action noise.
#[derive(Debug, Clone)]
pub struct MazeEpsGreedy {
    pub epsilon: f64,
    waypoints: Vec<[f64; 2]>,
    next: usize,
}

impl MazeEpsGreedy {
    pub fn new(spec: &crate::envs::MazeSpec, epsilon: f64) -> Self {
        let wall_end = spec.walls.iter().map(|w| w.x1).fold(0.0, f64::max);
        let side = ((wall_end + spec.width) / 2.0).min(spec.width);
        Self {
            epsilon,
            waypoints: vec![[side, spec.start[1]], [side, spec.goal[1]], spec.goal],
            next: 0,
        }
    }
}

impl BehaviorPolicy for MazeEpsGreedy {
    fn begin_episode(&mut self, _rng: &mut SimRng) {
        self.next = 0;
    }

    fn act(&mut self, obs: &[f64], rng: &mut SimRng) -> Vec<f64> {
        if rng.random::<f64>() < self.epsilon {
            return vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        }
        let (p, v) = ([obs[0], obs[1]], [obs[2], obs[3]]);
        let mut w = self.waypoints[self.next];
        let dist = ((w[0] - p[0]).powi(2) + (w[1] - p[1]).powi(2)).sqrt();
        if dist < 0.3 && self.next + 1 < self.waypoints.len() {
            self.next += 1;
            w = self.waypoints[self.next];
        }
        (0..2)
            .map(|i| (2.0 * (w[i] - p[i]) - 1.0 * v[i]).clamp(-1.0, 1.0))
            .collect()
    }
}

/// SoC wrapper that feeds step rewards back into the bandit estimates.
#[derive(Debug, Clone)]
pub struct SocBehavior(pub SocPolicy);

impl BehaviorPolicy for SocBehavior {
    fn begin_episode(&mut self, _rng: &mut SimRng) {
        self.0.reset();
    }

    fn act(&mut self, obs: &[f64], rng: &mut SimRng) -> Vec<f64> {
        vec![self.0.select_exploring(obs, rng) as f64]
    }

    fn observe(&mut self, action: &[f64], reward: f64) {
        self.0.update(action[0] as usize, reward);
    }
}

pub fn build_policy(env: &EnvSpec, policy: &PolicySpec) -> Result<Box<dyn BehaviorPolicy>> {
    match (env, policy) {
        (EnvSpec::Dial(_), PolicySpec::Mixture { sigma }) => Ok(Box::new(DialMixture::new(*sigma))),
        (EnvSpec::Dial(_), PolicySpec::EpsGreedy { epsilon }) => {
            // constant mid-dial action with random overrides
            Ok(Box::new(EpsConstant { epsilon: *epsilon }))
        }
        (EnvSpec::Treatment(spec), PolicySpec::Soc { alpha, epsilon }) => {
            let mut p = SocPolicy::new(spec, *alpha)?;
            p.epsilon = *epsilon;
            Ok(Box::new(SocBehavior(p)))
        }
        (EnvSpec::Chain(spec), PolicySpec::EpsGreedy { epsilon }) => Ok(Box::new(ChainEpsGreedy {
            epsilon: *epsilon,
            q: value_iteration(spec),
            n_states: spec.n_states,
            horizon: spec.horizon,
        })),
        (EnvSpec::Maze(spec), PolicySpec::EpsGreedy { epsilon }) => {
            Ok(Box::new(MazeEpsGreedy::new(spec, *epsilon)))
        }
        _ => Err(Error::usage(format!(
            "policy {:?} is not available for environment {}",
            policy.kind(),
            env.env_id()
        ))),
    }
}

#[derive(Debug, Clone)]
struct EpsConstant {
    epsilon: f64,
}

impl BehaviorPolicy for EpsConstant {
    fn begin_episode(&mut self, _rng: &mut SimRng) {}

    fn act(&mut self, _obs: &[f64], rng: &mut SimRng) -> Vec<f64> {
        if rng.random::<f64>() < self.epsilon {
            vec![rng.random_range(-1.0..=1.0)]
        } else {
            vec![0.0]
        }
    }
}

/// Runs one full episode of `policy` and returns its trajectory.
pub fn rollout_behavior(
    env: &mut dyn Environment,
    policy: &mut dyn BehaviorPolicy,
    gamma: f64,
    rng: &mut SimRng,
) -> Result<Option<Trajectory>> {
    let mut obs = env.reset(rng);
    policy.begin_episode(rng);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    while !env.is_done() {
        let action = policy.act(&obs, rng);
        let out = env.step(&action, rng)?;
        policy.observe(&action, out.reward);
        states.push(std::mem::replace(&mut obs, out.observation));
        actions.push(action);
        rewards.push(out.reward);
    }
    if rewards.is_empty() {
        return Ok(None);
    }
    Trajectory::new(states, actions, rewards, gamma).map(Some)
}

/// Rolls out `n_episodes` behavior episodes. Episode `i` draws from its own
/// generator derived from `(seed, i)`, so output is independent of scheduling.
pub fn collect_dataset(
    env_spec: &EnvSpec,
    policy: &PolicySpec,
    n_episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::usage("collect_dataset needs at least one episode"));
    }
    crate::trajectory::check_gamma(gamma)?;
    let mut env = env_spec.build()?;
    let mut behavior = build_policy(env_spec, policy)?;
    let dims = env.dims();
    let mut trajectories = Vec::with_capacity(n_episodes);
    for episode in 0..n_episodes {
        let mut rng = crate::rng::rng_for(seed, &[episode as u64]);
        if let Some(traj) = rollout_behavior(env.as_mut(), behavior.as_mut(), gamma, &mut rng)? {
            trajectories.push(traj);
        }
    }
    Dataset::new(env_spec.env_id(), gamma, dims, trajectories)
}

fn top_mask(ds: &Dataset, percent: f64) -> Vec<bool> {
    let n = ds.len();
    let n_cut = ((percent * n as f64 / 100.0) - 1e-9).ceil().max(0.0) as usize;
    if n_cut == 0 {
        return vec![false; n];
    }
    let mut sorted: Vec<f64> = ds.trajectories.iter().map(Trajectory::total_return).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[n_cut.min(n) - 1];
    ds.trajectories
        .iter()
        .map(|t| t.total_return() >= threshold)
        .collect()
}

/// Drops the best `ceil(percent * n / 100)` trajectories by return, together
/// with anything tied with the cut. `r_max` is recomputed.
pub fn filter_top_returns(ds: &Dataset, percent: f64) -> Result<Dataset> {
    if !(0.0..100.0).contains(&percent) {
        return Err(Error::usage(format!("percent must lie in [0, 100), got {percent}")));
    }
    let top = top_mask(ds, percent);
    let kept: Vec<Trajectory> = ds
        .trajectories
        .iter()
        .zip(&top)
        .filter(|(_, t)| !**t)
        .map(|(tr, _)| tr.clone())
        .collect();
    if kept.is_empty() && !ds.is_empty() {
        return Err(Error::usage("filtering would remove every trajectory"));
    }
    Ok(ds.with_trajectories(kept))
}

/// Keeps the best `ceil(percent * n / 100)` trajectories by return plus
/// anything tied with the cut; the complement of
/// [`filter_top_returns`] at the same percent.
pub fn keep_top_returns(ds: &Dataset, percent: f64) -> Result<Dataset> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::usage(format!("percent must lie in (0, 100], got {percent}")));
    }
    let top = top_mask(ds, percent);
    let kept = ds
        .trajectories
        .iter()
        .zip(&top)
        .filter(|(_, t)| **t)
        .map(|(tr, _)| tr.clone())
        .collect();
    Ok(ds.with_trajectories(kept))
}

/// Removes every trajectory whose return exceeds `cap`.
pub fn drop_returns_above(ds: &Dataset, cap: f64) -> Result<Dataset> {
    let kept: Vec<Trajectory> = ds
        .trajectories
        .iter()
        .filter(|t| t.total_return() <= cap)
        .cloned()
        .collect();
    if kept.is_empty() && !ds.is_empty() {
        return Err(Error::usage(format!("no trajectory has return <= {cap}")));
    }
    Ok(ds.with_trajectories(kept))
}
