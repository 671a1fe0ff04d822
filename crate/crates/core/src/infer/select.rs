//! Candidate generation around a target return and the selection rules.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{slot, MaskedSequence, Modality, Network, Scalar};
use crate::trajectory::SubTrajectory;

/// `N` independent uniform draws from `[r - delta, r + delta]`.
pub fn sample_returns<R: Rng + ?Sized>(r: f64, delta: f64, n: usize, rng: &mut R) -> Vec<f64> {
    if delta == 0.0 {
        return vec![r; n];
    }
    (0..n).map(|_| rng.random_range(r - delta..=r + delta)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub returns: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub q: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Candidates per forward pass.
const CANDIDATE_CHUNK: usize = 32;

/// Copies of `window` whose final return token is each of `returns`, with
/// only the final action token masked.
fn candidate_sequences(window: &SubTrajectory, returns: &[f64]) -> Vec<MaskedSequence> {
    let k = window.context_len();
    let mut mask = vec![false; 3 * k];
    mask[slot(k - 1, Modality::Action)] = true;
    returns
        .iter()
        .map(|r| {
            let mut w = window.clone();
            w.returns[k - 1] = *r;
            MaskedSequence { window: w, mask: mask.clone(), bootstrap: None }
        })
        .collect()
}

/// Batched forward passes over all candidate returns. The proposed action
/// and its value are both read at the final timestep. With `rescore`, the
/// proposed actions are written into the (now visible) action token and `q`
/// comes from a second pass.
pub fn propose_candidates<F: Scalar>(
    net: &Network<F>,
    window: &SubTrajectory,
    returns: &[f64],
    rescore: bool,
) -> Result<CandidateSet> {
    if returns.is_empty() {
        return Err(Error::usage("candidate set needs at least one return sample"));
    }
    let cfg = &net.config;
    let k = window.context_len();
    let mut actions = Vec::with_capacity(returns.len());
    let mut q = Vec::with_capacity(returns.len());
    // rows are independent, so chunking only bounds the activation buffers
    for chunk in returns.chunks(CANDIDATE_CHUNK) {
        let seqs = candidate_sequences(window, chunk);
        let out = net.forward_heads(&seqs)?;
        let first = actions.len();
        actions.extend((0..chunk.len()).map(|b| out.action_choice(cfg, b, k - 1)));
        if rescore {
            let seqs: Vec<MaskedSequence> = seqs
                .into_iter()
                .zip(&actions[first..])
                .map(|(mut s, a)| {
                    s.window.actions[k - 1] = a.clone();
                    s.mask[slot(k - 1, Modality::Action)] = false;
                    s
                })
                .collect();
            let out2 = net.forward_heads(&seqs)?;
            q.extend((0..chunk.len()).map(|b| out2.q_raw(cfg, b, k - 1)));
        } else {
            q.extend((0..chunk.len()).map(|b| out.q_raw(cfg, b, k - 1)));
        }
    }
    if let Some(i) = q.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite q for candidate {i}")));
    }
    Ok(CandidateSet { returns: returns.to_vec(), actions, q })
}

/// Index of the candidate whose value is nearest to `target`, lowest index on ties.
pub fn double_check_select(q: &[f64], target: f64) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::usage("cannot select from an empty candidate set"));
    }
    let mut best = 0;
    let mut best_d = (q[0] - target).abs();
    for (i, v) in q.iter().enumerate().skip(1) {
        let d = (v - target).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

/// Softmax of `beta * q` with the maximum subtracted first.
pub fn boltzmann_probs(q: &[f64], beta: f64) -> Vec<f64> {
    let mx = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = q.iter().map(|v| (beta * (v - mx)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn boltzmann_select<R: Rng + ?Sized>(q: &[f64], beta: f64, rng: &mut R) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::usage("cannot select from an empty candidate set"));
    }
    let p = boltzmann_probs(q, beta);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(p.iter().rposition(|v| *v > 0.0).unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_ball_repeats_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_returns(3.5, 0.0, 4, &mut rng), vec![3.5; 4]);
        let one = sample_returns(3.5, 0.5, 1, &mut rng);
        assert!(one.len() == 1 && (3.0..=4.0).contains(&one[0]));
    }

    #[test]
    fn uniform_ball_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_returns(10.0, 1.0, 100_000, &mut rng);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 10.0).abs() < 0.01);
        assert!(s.iter().all(|v| (9.0..=11.0).contains(v)));
    }

    #[test]
    fn selection_examples() {
        assert_eq!(double_check_select(&[5.0, 7.0, 9.5], 8.0).unwrap(), 1);
        assert_eq!(double_check_select(&[5.0, 7.0, 9.5], 100.0).unwrap(), 2);
        assert_eq!(double_check_select(&[1.0, 3.0], 2.0).unwrap(), 0);
        assert!(double_check_select(&[], 0.0).is_err());
    }

    #[test]
    fn boltzmann_examples() {
        assert_eq!(boltzmann_probs(&[1.0, 4.0, -2.0], 0.0), vec![1.0 / 3.0; 3]);
        assert_eq!(boltzmann_probs(&[1.0, 1.0], 50.0), vec![0.5, 0.5]);
        let p = boltzmann_probs(&[0.0, 2f64.ln()], 1.0);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
        // huge beta * q does not overflow
        let p = boltzmann_probs(&[1e6, 0.0], 100.0);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn boltzmann_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = [0.0, 2f64.ln()];
        let n = 30_000;
        let hits = (0..n).filter(|_| boltzmann_select(&q, 1.0, &mut rng).unwrap() == 1).count();
        let p = 2.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits as f64 - n as f64 * p).abs() < 3.0 * sigma);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn selection_is_a_nearest_candidate(q in proptest::collection::vec(-50.0f64..50.0, 1..40), target in -80.0f64..80.0) {
                let i = double_check_select(&q, target).unwrap();
                for v in &q {
                    prop_assert!((q[i] - target).abs() <= (v - target).abs());
                }
                if q.iter().all(|v| *v < target) {
                    prop_assert!(q.iter().all(|v| *v <= q[i]));
                }
                if q.iter().all(|v| *v > target) {
                    prop_assert!(q.iter().all(|v| *v >= q[i]));
                }
            }

            #[test]
            fn boltzmann_normalized_and_shift_invariant(q in proptest::collection::vec(-5.0f64..5.0, 1..20), beta in 0.0f64..100.0, c in -100.0f64..100.0) {
                let p = boltzmann_probs(&q, beta);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
                let p2 = boltzmann_probs(&shifted, beta);
                for (a, b) in p.iter().zip(&p2) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
