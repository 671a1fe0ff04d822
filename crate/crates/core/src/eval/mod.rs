//! Alignment metrics, ablation runners and treatment safety statistics.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::envs::{EnvSpec, EpisodeEnd};
use crate::error::{Error, Result};
use crate::infer::{rollout_aligned, InferConfig, Rollout};
use crate::io::write_records;
use crate::model::{ModelConfig, Network, Scalar};
use crate::rng::rng_for;
use crate::train::{train_model, TrainConfig};
use crate::trajectory::Dataset;

const SWEEP_STREAM: u64 = 0xa11;
const SAFETY_STREAM: u64 = 0x5afe;

/// `|target - sum(rewards)|`.
pub fn abs_error(target: f64, rewards: &[f64]) -> f64 {
    (target - rewards.iter().sum::<f64>()).abs()
}

/// `start:stop:step`, endpoints inclusive when `step` divides the range.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::usage(format!("target grid {spec:?} is not start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(Error::usage(format!("target grid {spec:?} needs step > 0 and stop >= start")));
    }
    // tolerate representation error so that 0.1:1.0:0.1 has ten points
    let n = ((stop - start) / step * (1.0 + 1e-12) + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

/// `n` evenly spaced fractions of `r_max` from `lo` to `hi` inclusive.
pub fn fraction_grid(r_max: f64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo * r_max];
    }
    (0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64) * r_max)
        .collect()
}

/// The default grid for averaged errors: nine targets from 0.1 to 1.0 of `r_max`.
pub fn default_target_grid(r_max: f64) -> Vec<f64> {
    fraction_grid(r_max, 0.1, 1.0, 9)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub target: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_abs_err: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub rows: Vec<AlignmentRow>,
    pub r_max: f64,
    /// Share of top-return trajectories removed from the training data.
    pub removal_percent: f64,
}

impl AlignmentReport {
    /// Error averaged over the target rows.
    pub fn mean_abs_err(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.mean_abs_err).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("target,mean_return,std_return,mean_abs_err,episodes\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.target, r.mean_return, r.std_return, r.mean_abs_err, r.episodes);
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rolls out `episodes` aligned episodes per target. Episode `e` of target
/// `i` uses generators derived from `(seed, i, e)`.
pub fn alignment_sweep<F: Scalar>(
    net: &Network<F>,
    env_spec: &EnvSpec,
    targets: &[f64],
    episodes: usize,
    cfg: &InferConfig,
    seed: u64,
) -> Result<AlignmentReport> {
    let mut env = env_spec.build()?;
    let mut rows = Vec::with_capacity(targets.len());
    for (i, &target) in targets.iter().enumerate() {
        let mut achieved = Vec::with_capacity(episodes);
        let mut errs = Vec::with_capacity(episodes);
        for e in 0..episodes {
            let roll = run_episode(env.as_mut(), net, target, cfg, seed, SWEEP_STREAM, i, e)?;
            errs.push(abs_error(target, &roll.rewards));
            achieved.push(roll.achieved());
        }
        let (mean_return, std_return) = mean_std(&achieved);
        rows.push(AlignmentRow {
            target,
            mean_return,
            std_return,
            mean_abs_err: mean_std(&errs).0,
            episodes,
        });
    }
    Ok(AlignmentReport {
        rows,
        r_max: 0.0,
        removal_percent: 0.0,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_episode<F: Scalar>(
    env: &mut dyn crate::envs::Environment,
    net: &Network<F>,
    target: f64,
    cfg: &InferConfig,
    seed: u64,
    stream: u64,
    i: usize,
    e: usize,
) -> Result<Rollout> {
    let mut env_rng = rng_for(seed, &[stream, i as u64, e as u64, 0]);
    let mut rng = rng_for(seed, &[stream, i as u64, e as u64, 1]);
    rollout_aligned(env, net, target, cfg, &mut env_rng, &mut rng)
}

/// One row per entry of `n_list` (duplicates kept): the target-averaged
/// absolute error with that many candidates.
pub fn ablation_n<F: Scalar>(
    net: &Network<F>,
    env_spec: &EnvSpec,
    n_list: &[usize],
    targets: &[f64],
    episodes: usize,
    base: &InferConfig,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    n_list
        .iter()
        .map(|&n| {
            let cfg = InferConfig { n_candidates: n, ..base.clone() };
            let rep = alignment_sweep(net, env_spec, targets, episodes, &cfg, seed)?;
            Ok((n.to_string(), rep.mean_abs_err()))
        })
        .collect()
}

pub fn ablation_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("variant_or_N,mean_abs_err\n");
    for (name, err) in rows {
        let _ = writeln!(s, "{name},{err}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentAblation {
    /// `(variant, seed-averaged error)` for `full`, `no_random_mask`, `no_double_check`.
    pub rows: Vec<(String, f64)>,
    /// Per-seed errors in the same variant order.
    pub per_seed: Vec<[f64; 3]>,
}

/// Trains the full model and the autoregressive-only variant for every
/// seed and evaluates three variants over `targets`. The conditioning-only
/// variant reuses the full model's weights.
#[allow(clippy::too_many_arguments)]
pub fn ablation_components(
    ds: &Dataset,
    env_spec: &EnvSpec,
    model: &ModelConfig,
    train: &TrainConfig,
    targets: &[f64],
    episodes: usize,
    infer: &InferConfig,
    seeds: &[u64],
) -> Result<ComponentAblation> {
    if seeds.is_empty() {
        return Err(Error::usage("component ablation needs at least one seed"));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let full_cfg = TrainConfig { seed, ..train.clone() };
        let (full, _) = train_model(ds, model.clone(), &full_cfg, None)?;
        let ar_cfg = TrainConfig { seed, mask: train.mask.without_random(), ..train.clone() };
        let (no_rm, _) = train_model(ds, model.clone(), &ar_cfg, None)?;
        let cond = InferConfig::conditioning_only(infer.gamma);
        per_seed.push([
            alignment_sweep(&full, env_spec, targets, episodes, infer, seed)?.mean_abs_err(),
            alignment_sweep(&no_rm, env_spec, targets, episodes, infer, seed)?.mean_abs_err(),
            alignment_sweep(&full, env_spec, targets, episodes, &cond, seed)?.mean_abs_err(),
        ]);
    }
    let names = ["full", "no_random_mask", "no_double_check"];
    let rows = (0..3)
        .map(|v| {
            let m = per_seed.iter().map(|r| r[v]).sum::<f64>() / per_seed.len() as f64;
            (names[v].to_string(), m)
        })
        .collect();
    Ok(ComponentAblation { rows, per_seed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetyReport {
    pub target_fraction: f64,
    pub target: f64,
    pub mean_return: f64,
    pub adverse_events: usize,
    pub remissions: usize,
    pub exhausted: usize,
    /// Adverse events per 1000 episodes.
    pub adverse_per_1k: f64,
    pub remission_rate: f64,
    pub episodes: usize,
}

impl SafetyReport {
    pub fn from_ends(target_fraction: f64, target: f64, returns: &[f64], ends: &[Option<EpisodeEnd>]) -> Self {
        let count = |want: EpisodeEnd| ends.iter().filter(|e| **e == Some(want)).count();
        let adverse = count(EpisodeEnd::Adverse);
        let remissions = count(EpisodeEnd::Remission);
        let n = ends.len();
        let denom = n.max(1) as f64;
        Self {
            target_fraction,
            target,
            mean_return: mean_std(returns).0,
            adverse_events: adverse,
            remissions,
            exhausted: n - adverse - remissions,
            adverse_per_1k: 1000.0 * adverse as f64 / denom,
            remission_rate: remissions as f64 / denom,
            episodes: n,
        }
    }
}

pub fn safety_csv(rows: &[SafetyReport]) -> String {
    let mut s = String::from("target_fraction,mean_return,adverse_per_1k,remission_rate,episodes\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.target_fraction, r.mean_return, r.adverse_per_1k, r.remission_rate, r.episodes
        );
    }
    s
}

/// Aligned episodes at `target_fraction * r_max`, tallied by how they ended.
pub fn safety_eval<F: Scalar>(
    net: &Network<F>,
    env_spec: &EnvSpec,
    r_max: f64,
    target_fraction: f64,
    episodes: usize,
    cfg: &InferConfig,
    seed: u64,
) -> Result<SafetyReport> {
    if !matches!(env_spec, EnvSpec::Treatment(_)) {
        return Err(Error::usage("safety evaluation needs a treatment environment"));
    }
    let target = target_fraction * r_max;
    let mut env = env_spec.build()?;
    let mut returns = Vec::with_capacity(episodes);
    let mut ends = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let roll = run_episode(env.as_mut(), net, target, cfg, seed, SAFETY_STREAM, 0, e)?;
        returns.push(roll.achieved());
        ends.push(roll.end);
    }
    Ok(SafetyReport::from_ends(target_fraction, target, &returns, &ends))
}

pub fn write_text<P: AsRef<Path>>(path: P, text: &str) -> Result<()> {
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    write_records(path, &lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_error_examples() {
        assert_eq!(abs_error(10.0, &[3.0, 5.0]), 2.0);
        assert_eq!(abs_error(8.0, &[3.0, 5.0]), 0.0);
        // three-episode toy trace at 0.4 r_max with r_max = 20
        let target = 0.4 * 20.0;
        let eps = [vec![2.0, 3.0, 1.0], vec![4.0, 4.0, 1.5], vec![0.5, 0.5, 0.5]];
        let errs: Vec<f64> = eps.iter().map(|r| abs_error(target, r)).collect();
        assert_eq!(errs, vec![2.0, 1.5, 6.5]);
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(parse_grid("2:18:2").unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0]);
        assert_eq!(parse_grid("0:1:0.3").unwrap().len(), 4);
        assert_eq!(parse_grid("0.1:1.0:0.1").unwrap().len(), 10);
        assert_eq!(parse_grid("5:5:1").unwrap(), vec![5.0]);
        for bad in ["1:2", "a:b:c", "1:2:0", "3:1:1"] {
            assert_eq!(parse_grid(bad).unwrap_err().exit_code(), 2);
        }
    }

    #[test]
    fn default_grid_spans_tenth_to_full() {
        let g = default_target_grid(20.0);
        assert_eq!(g.len(), 9);
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[8] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn safety_counts_partition_episodes() {
        let ends = [Some(EpisodeEnd::Adverse), Some(EpisodeEnd::Remission), Some(EpisodeEnd::Horizon), None, Some(EpisodeEnd::Remission)];
        let r = SafetyReport::from_ends(0.4, 6.4, &[1.0, 2.0, 3.0, 4.0, 5.0], &ends);
        assert_eq!(r.adverse_events + r.remissions + r.exhausted, r.episodes);
        assert_eq!(r.adverse_per_1k, 200.0);
        assert_eq!(r.remission_rate, 0.4);
        assert_eq!(r.mean_return, 3.0);
        let all_remit = SafetyReport::from_ends(0.8, 1.0, &[16.0; 3], &[Some(EpisodeEnd::Remission); 3]);
        assert_eq!(all_remit.adverse_events, 0);
    }

    #[test]
    fn csv_layouts() {
        let rep = AlignmentReport {
            rows: vec![AlignmentRow { target: 2.0, mean_return: 2.5, std_return: 0.5, mean_abs_err: 0.75, episodes: 10 }],
            r_max: 20.0,
            removal_percent: 0.0,
        };
        assert_eq!(rep.to_csv(), "target,mean_return,std_return,mean_abs_err,episodes\n2,2.5,0.5,0.75,10\n");
        assert_eq!(ablation_csv(&[("2".into(), 1.5), ("2".into(), 1.5)]), "variant_or_N,mean_abs_err\n2,1.5\n2,1.5\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn grid_count(start in -50i32..50, len in 0i32..40, step in 1i32..7) {
                let stop = start + len;
                let g = parse_grid(&format!("{start}:{stop}:{step}")).unwrap();
                prop_assert_eq!(g.len(), (len / step) as usize + 1);
                prop_assert_eq!(g[0], start as f64);
                if len % step == 0 {
                    prop_assert_eq!(*g.last().unwrap(), stop as f64);
                }
            }

            #[test]
            fn abs_error_nonnegative(t in -100.0f64..100.0, r in proptest::collection::vec(-10.0f64..10.0, 0..20)) {
                let e = abs_error(t, &r);
                prop_assert!(e >= 0.0);
                prop_assert_eq!(e == 0.0, t == r.iter().sum::<f64>());
            }
        }
    }
}
