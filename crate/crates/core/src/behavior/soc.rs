//! Standard-of-care clinician: a recency-weighted bandit over treatments that
//! refuses drugs aggravating symptoms already past the danger line.

use rand::{Rng, SeedableRng};

use crate::envs::{Environment, SimRng, TreatmentEnv, TreatmentSpec};
use crate::error::Result;

/// Monte-Carlo draws per action when estimating the initial values.
pub const Q0_DRAWS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct SocPolicy {
    /// Current per-treatment value estimates.
    pub q: Vec<f64>,
    /// Initial estimates `E[R | a]`, restored at the start of every episode.
    pub q0: Vec<f64>,
    pub alpha: f64,
    /// Probability of a uniformly random safe treatment (0 gives the plain clinician).
    pub epsilon: f64,
    danger_line: f64,
    symptom_shift: Vec<Vec<f64>>,
}

impl SocPolicy {
    /// Builds the clinician for `spec`, estimating `E[R | a]` from
    /// [`Q0_DRAWS`] single-step episodes per treatment.
    pub fn new(spec: &TreatmentSpec, alpha: f64) -> Result<Self> {
        let mut env = TreatmentEnv::new(spec.clone())?;
        let mut rng = SimRng::seed_from_u64(crate::rng::derive(spec.seed, &[0x50c]));
        let mut q0 = Vec::with_capacity(spec.n_actions);
        for a in 0..spec.n_actions {
            let mut total = 0.0;
            for _ in 0..Q0_DRAWS {
                env.reset(&mut rng);
                total += env.step(&[a as f64], &mut rng)?.reward;
            }
            q0.push(total / Q0_DRAWS as f64);
        }
        Ok(Self::with_initial_values(spec, q0, alpha))
    }

    pub fn with_initial_values(spec: &TreatmentSpec, q0: Vec<f64>, alpha: f64) -> Self {
        Self {
            q: q0.clone(),
            q0,
            alpha,
            epsilon: 0.0,
            danger_line: spec.danger_line(),
            symptom_shift: spec.symptom_shift.clone(),
        }
    }

    pub fn reset(&mut self) {
        self.q.clone_from(&self.q0);
    }

    fn violations(&self, obs: &[f64], a: usize) -> usize {
        obs.iter()
            .zip(&self.symptom_shift[a])
            .filter(|(o, shift)| **o >= self.danger_line && **shift > 0.0)
            .count()
    }

    /// Treatments that raise no symptom already at or above the danger line.
    pub fn safe_set(&self, obs: &[f64]) -> Vec<usize> {
        (0..self.q.len())
            .filter(|a| self.violations(obs, *a) == 0)
            .collect()
    }

    /// Greedy choice within the safe set (lowest index on ties). With an
    /// empty safe set, the treatment violating the fewest constraints.
    pub fn select(&self, obs: &[f64]) -> usize {
        let safe = self.safe_set(obs);
        if safe.is_empty() {
            return (0..self.q.len())
                .min_by_key(|a| (self.violations(obs, *a), *a))
                .unwrap_or(0);
        }
        let mut best = safe[0];
        for &a in &safe[1..] {
            if self.q[a] > self.q[best] {
                best = a;
            }
        }
        best
    }

    pub fn select_exploring<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> usize {
        if self.epsilon > 0.0 && rng.random::<f64>() < self.epsilon {
            let safe = self.safe_set(obs);
            if !safe.is_empty() {
                return safe[rng.random_range(0..safe.len())];
            }
        }
        self.select(obs)
    }

    /// `Q(a) <- Q(a) + alpha (R - Q(a))` for the taken treatment only.
    pub fn update(&mut self, action: usize, reward: f64) {
        self.q[action] += self.alpha * (reward - self.q[action]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::treatment::TreatmentGenConfig;

    fn three_treatment_spec() -> TreatmentSpec {
        let cfg = TreatmentGenConfig {
            n_states: 3,
            n_actions: 3,
            obs_dim: 2,
            ..Default::default()
        };
        let mut spec = TreatmentSpec::generate_with(1, &cfg).unwrap();
        // symptom 0: only treatment 1 does not raise it
        spec.symptom_shift = vec![vec![0.5, 0.0], vec![-0.4, 0.3], vec![0.2, -0.1]];
        spec
    }

    #[test]
    fn calm_observation_allows_plain_argmax() {
        let spec = three_treatment_spec();
        let p = SocPolicy::with_initial_values(&spec, vec![1.0, 3.0, 2.0], 0.25);
        assert_eq!(p.select(&[0.0, 0.0]), 1);
        let p = SocPolicy::with_initial_values(&spec, vec![5.0, 3.0, 2.0], 0.25);
        assert_eq!(p.select(&[0.0, 0.0]), 0);
    }

    #[test]
    fn dangerous_symptom_restricts_choice() {
        let spec = three_treatment_spec();
        // treatment 1 is the worst by value but the only safe one
        let p = SocPolicy::with_initial_values(&spec, vec![9.0, -5.0, 7.0], 0.25);
        assert_eq!(p.safe_set(&[1.0, 0.0]), vec![1]);
        assert_eq!(p.select(&[1.0, 0.0]), 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let spec = three_treatment_spec();
        let p = SocPolicy::with_initial_values(&spec, vec![2.0, 1.0, 2.0], 0.25);
        assert_eq!(p.select(&[0.0, 0.0]), 0);
    }

    #[test]
    fn empty_safe_set_falls_back_to_least_violating() {
        let spec = three_treatment_spec();
        let p = SocPolicy::with_initial_values(&spec, vec![0.0, 10.0, 0.0], 0.25);
        // both symptoms dangerous: violations are 1, 1, 1 -> lowest index
        assert!(p.safe_set(&[1.0, 1.0]).is_empty());
        assert_eq!(p.select(&[1.0, 1.0]), 0);
    }

    #[test]
    fn update_examples() {
        let spec = three_treatment_spec();
        let mut p = SocPolicy::with_initial_values(&spec, vec![0.0; 3], 0.1);
        p.update(0, 1.0);
        assert!((p.q[0] - 0.1).abs() < 1e-15);
        assert_eq!(&p.q[1..], &[0.0, 0.0]);

        let mut frozen = SocPolicy::with_initial_values(&spec, vec![0.3; 3], 0.0);
        frozen.update(2, 10.0);
        assert_eq!(frozen.q, vec![0.3; 3]);

        let mut replace = SocPolicy::with_initial_values(&spec, vec![0.3; 3], 1.0);
        replace.update(2, 10.0);
        assert_eq!(replace.q[2], 10.0);
    }

    #[test]
    fn initial_values_are_reproducible() {
        let spec = TreatmentSpec::generate(12).unwrap();
        let a = SocPolicy::new(&spec, 0.25).unwrap();
        let b = SocPolicy::new(&spec, 0.25).unwrap();
        assert_eq!(a.q0, b.q0);
        assert_eq!(a.q0.len(), spec.n_actions);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn update_contracts_toward_reward(q in -20.0f64..20.0, r in -20.0f64..20.0, alpha in 0.0f64..=1.0) {
                let spec = three_treatment_spec();
                let mut p = SocPolicy::with_initial_values(&spec, vec![q; 3], alpha);
                p.update(1, r);
                let lhs = (p.q[1] - r).abs();
                let rhs = (1.0 - alpha) * (q - r).abs();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + q.abs() + r.abs()));
                prop_assert_eq!(p.q[0], q);
                prop_assert_eq!(p.q[2], q);
            }

            #[test]
            fn never_unsafe_when_safe_exists(
                seed in 0u64..500,
                obs in proptest::collection::vec(0.0f64..=1.0, 8),
                q0 in proptest::collection::vec(-10.0f64..10.0, 6),
            ) {
                let spec = TreatmentSpec::generate(seed).unwrap();
                let p = SocPolicy::with_initial_values(&spec, q0, 0.25);
                let safe = p.safe_set(&obs);
                if !safe.is_empty() {
                    prop_assert!(safe.contains(&p.select(&obs)));
                }
            }
        }
    }
}
