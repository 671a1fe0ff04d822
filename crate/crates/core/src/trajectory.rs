//! Episodes, returns-to-go and fixed-length context windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking the return recursion on 64-bit data.
pub const RETURN_RECURSION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Continuous,
    Discrete,
}

/// Shapes shared by every trajectory of a dataset.
///
/// For discrete actions `action_dim` is the number of actions and each stored
/// action is a one-element vector holding the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_kind: ActionKind,
}

impl ModalityDims {
    /// Width of one stored action vector.
    pub fn stored_action_width(&self) -> usize {
        match self.action_kind {
            ActionKind::Continuous => self.action_dim,
            ActionKind::Discrete => 1,
        }
    }

    pub fn check_action(&self, action: &[f64]) -> Result<()> {
        match self.action_kind {
            ActionKind::Continuous => {
                if action.len() != self.action_dim {
                    return Err(Error::usage(format!(
                        "action has {} components, expected {}",
                        action.len(),
                        self.action_dim
                    )));
                }
            }
            ActionKind::Discrete => {
                let ok = action.len() == 1
                    && action[0] >= 0.0
                    && action[0].fract() == 0.0
                    && (action[0] as usize) < self.action_dim;
                if !ok {
                    return Err(Error::usage(format!(
                        "invalid discrete action {:?} for {} actions",
                        action, self.action_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Discounted return-to-go for every timestep: `out[t] = sum_{i>=t} gamma^(i-t) r_i`.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::usage("compute_returns needs at least one reward"));
    }
    check_gamma(gamma)?;
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Target-return bookkeeping after observing reward `reward`: `(target - reward) / gamma`.
pub fn update_target_return(target: f64, reward: f64, gamma: f64) -> Result<f64> {
    if gamma == 0.0 || !(gamma > 0.0) {
        return Err(Error::usage(format!(
            "update_target_return requires gamma > 0, got {gamma}"
        )));
    }
    Ok((target - reward) / gamma)
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::usage(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

/// One episode with aligned states, actions, rewards and returns-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if states.len() != rewards.len() || actions.len() != rewards.len() {
            return Err(Error::usage(format!(
                "trajectory length mismatch: {} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                rewards.len()
            )));
        }
        let returns = compute_returns(&rewards, gamma)?;
        Ok(Self {
            states,
            actions,
            rewards,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Return of the whole episode (discounted return-to-go at t = 0).
    pub fn total_return(&self) -> f64 {
        self.returns[0]
    }

    /// Largest relative violation of `R_t = r_t + gamma R_{t+1}`.
    pub fn recursion_residual(&self, gamma: f64) -> f64 {
        let n = self.len();
        let mut worst = 0.0f64;
        for t in 0..n {
            let next = if t + 1 < n { self.returns[t + 1] } else { 0.0 };
            let expected = self.rewards[t] + gamma * next;
            let scale = expected.abs().max(self.returns[t].abs()).max(1.0);
            worst = worst.max((self.returns[t] - expected).abs() / scale);
        }
        worst
    }

    pub fn check_dims(&self, dims: &ModalityDims) -> Result<()> {
        for (t, s) in self.states.iter().enumerate() {
            if s.len() != dims.state_dim {
                return Err(Error::usage(format!(
                    "state at t={t} has dimension {}, expected {}",
                    s.len(),
                    dims.state_dim
                )));
            }
        }
        for a in &self.actions {
            dims.check_action(a)?;
        }
        Ok(())
    }
}

/// A static collection of trajectories from one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env_id: String,
    pub gamma: f64,
    pub dims: ModalityDims,
    pub trajectories: Vec<Trajectory>,
    /// Best episode return; fixed when the dataset is built (0 for an empty dataset).
    pub r_max: f64,
}

impl Dataset {
    pub fn new(
        env_id: impl Into<String>,
        gamma: f64,
        dims: ModalityDims,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        check_gamma(gamma)?;
        for traj in &trajectories {
            if traj.is_empty() {
                return Err(Error::usage("dataset trajectories must be nonempty"));
            }
            traj.check_dims(&dims)?;
        }
        let r_max = max_return(&trajectories);
        Ok(Self {
            env_id: env_id.into(),
            gamma,
            dims,
            trajectories,
            r_max,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Same header, different trajectory set; `r_max` is recomputed.
    pub fn with_trajectories(&self, trajectories: Vec<Trajectory>) -> Self {
        let r_max = max_return(&trajectories);
        Self {
            env_id: self.env_id.clone(),
            gamma: self.gamma,
            dims: self.dims,
            trajectories,
            r_max,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

pub(crate) fn max_return(trajectories: &[Trajectory]) -> f64 {
    trajectories
        .iter()
        .map(Trajectory::total_return)
        .reduce(f64::max)
        .unwrap_or(0.0)
}

/// A K-step context window. Missing prefix steps are left-padded and flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTrajectory {
    pub returns: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// `pad[k]` marks window slot `k` as padding (no real timestep behind it).
    pub pad: Vec<bool>,
    /// Trajectory index of the first real timestep in the window.
    pub start: usize,
    /// True when the last window slot is the final step of its episode.
    pub ends_episode: bool,
}

impl SubTrajectory {
    pub fn context_len(&self) -> usize {
        self.pad.len()
    }

    pub fn n_pad(&self) -> usize {
        self.pad.iter().filter(|p| **p).count()
    }

    /// Window of `k` steps whose last slot is trajectory step `end`.
    pub fn ending_at(traj: &Trajectory, end: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::usage("context length K must be at least 1"));
        }
        if end >= traj.len() {
            return Err(Error::usage(format!(
                "window end {end} outside trajectory of length {}",
                traj.len()
            )));
        }
        let n_real = (end + 1).min(k);
        let n_pad = k - n_real;
        let start = end + 1 - n_real;
        let state_dim = traj.states[0].len();
        let action_width = traj.actions[0].len();

        let mut w = SubTrajectory {
            returns: vec![0.0; n_pad],
            states: vec![vec![0.0; state_dim]; n_pad],
            actions: vec![vec![0.0; action_width]; n_pad],
            rewards: vec![0.0; n_pad],
            pad: vec![true; n_pad],
            start,
            ends_episode: end + 1 == traj.len(),
        };
        for t in start..=end {
            w.returns.push(traj.returns[t]);
            w.states.push(traj.states[t].clone());
            w.actions.push(traj.actions[t].clone());
            w.rewards.push(traj.rewards[t]);
            w.pad.push(false);
        }
        Ok(w)
    }
}

/// Uniformly pick a window end in `traj`, then take the K steps ending there.
pub fn sample_subtrajectory<R: Rng + ?Sized>(
    traj: &Trajectory,
    k: usize,
    rng: &mut R,
) -> Result<SubTrajectory> {
    if traj.is_empty() {
        return Err(Error::usage("cannot sample a window from an empty trajectory"));
    }
    let end = rng.random_range(0..traj.len());
    SubTrajectory::ending_at(traj, end, k)
}

/// Two-step batch sampling: a trajectory uniformly at random, then a window in it.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    batch_size: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<SubTrajectory>> {
    sample_positions(ds, batch_size, rng)?
        .into_iter()
        .map(|(i, end)| SubTrajectory::ending_at(&ds.trajectories[i], end, k))
        .collect()
}

/// `(trajectory index, window end)` pairs drawn exactly as [`sample_batch`] draws them.
pub fn sample_positions<R: Rng + ?Sized>(ds: &Dataset, batch_size: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if ds.is_empty() {
        return Err(Error::usage("cannot sample a batch from an empty dataset"));
    }
    Ok((0..batch_size)
        .map(|_| {
            let i = rng.random_range(0..ds.len());
            (i, rng.random_range(0..ds.trajectories[i].len()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: direct nested summation.
    fn returns_by_summation(rewards: &[f64], gamma: f64) -> Vec<f64> {
        (0..rewards.len())
            .map(|t| {
                (t..rewards.len())
                    .map(|i| gamma.powi((i - t) as i32) * rewards[i])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn returns_examples() {
        assert_eq!(compute_returns(&[0.0, 0.0, 0.0], 0.99).unwrap(), vec![0.0; 3]);
        assert_eq!(returns_by_summation(&[1.0, 2.0, 3.0], 1.0), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_returns(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(returns_by_summation(&[1.0, 1.0, 1.0], 0.5), vec![1.75, 1.5, 1.0]);
        assert_eq!(compute_returns(&[1.0, 1.0, 1.0], 0.5).unwrap(), vec![1.75, 1.5, 1.0]);
    }

    #[test]
    fn returns_errors() {
        assert!(matches!(compute_returns(&[], 0.9), Err(Error::Usage(_))));
        assert!(matches!(compute_returns(&[1.0], 1.5), Err(Error::Usage(_))));
        assert!(matches!(compute_returns(&[1.0], -0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn target_update_examples() {
        assert_eq!(update_target_return(10.0, 1.0, 1.0).unwrap(), 9.0);
        assert_eq!(update_target_return(10.0, 1.0, 0.5).unwrap(), 18.0);
        assert_eq!(update_target_return(0.0, 0.0, 0.99).unwrap(), 0.0);
        assert!(matches!(update_target_return(1.0, 0.0, 0.0), Err(Error::Usage(_))));
    }

    fn toy(len: usize) -> Trajectory {
        let states = (0..len).map(|t| vec![t as f64]).collect();
        let actions = (0..len).map(|t| vec![t as f64 * 0.1]).collect();
        let rewards = (0..len).map(|t| 1.0 + t as f64).collect();
        Trajectory::new(states, actions, rewards, 1.0).unwrap()
    }

    #[test]
    fn single_step_window_is_left_padded() {
        let traj = toy(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = sample_subtrajectory(&traj, 4, &mut rng).unwrap();
        assert_eq!(w.pad, vec![true, true, true, false]);
        assert_eq!(w.returns[3], 1.0);
        assert_eq!(w.start, 0);
        assert!(w.ends_episode);
    }

    #[test]
    fn window_sampling_is_deterministic() {
        let traj = toy(10);
        let a = sample_subtrajectory(&traj, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_subtrajectory(&traj, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_end_histogram_is_uniform() {
        let traj = toy(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000usize;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let w = sample_subtrajectory(&traj, 4, &mut rng).unwrap();
            let end = w.start + (4 - w.n_pad()) - 1;
            counts[end] += 1;
        }
        // multinomial: each bin ~ Binomial(n, 1/10)
        let p = 0.1;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn window_contents_follow_source() {
        let traj = toy(10);
        let w = SubTrajectory::ending_at(&traj, 5, 4).unwrap();
        assert_eq!(w.start, 2);
        assert_eq!(w.rewards, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w.returns[0], traj.returns[2]);
        assert!(!w.ends_episode);
        assert!(SubTrajectory::ending_at(&traj, 10, 4).is_err());
        assert!(SubTrajectory::ending_at(&traj, 3, 0).is_err());
    }

    #[test]
    fn dataset_tracks_best_return() {
        let dims = ModalityDims {
            state_dim: 1,
            action_dim: 1,
            action_kind: ActionKind::Continuous,
        };
        let ds = Dataset::new("toy", 1.0, dims, vec![toy(3), toy(5), toy(2)]).unwrap();
        assert_eq!(ds.r_max, 15.0);
        let empty = Dataset::new("toy", 1.0, dims, vec![]).unwrap();
        assert_eq!(empty.r_max, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn recursion_holds_and_inverts(
                rewards in proptest::collection::vec(-10.0f64..10.0, 1..40),
                gamma in 0.01f64..=1.0,
            ) {
                let states = vec![vec![0.0]; rewards.len()];
                let actions = vec![vec![0.0]; rewards.len()];
                let traj = Trajectory::new(states, actions, rewards.clone(), gamma).unwrap();
                prop_assert!(traj.recursion_residual(gamma) <= RETURN_RECURSION_TOL);
                for t in 0..rewards.len() - 1 {
                    let next = update_target_return(traj.returns[t], rewards[t], gamma).unwrap();
                    let scale = (traj.returns[t].abs() + rewards[t].abs() + 1.0) / gamma;
                    prop_assert!((next - traj.returns[t + 1]).abs() <= 1e-9 * scale);
                }
            }
        }
    }
}
