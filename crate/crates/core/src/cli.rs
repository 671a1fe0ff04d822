//! Command-line front end. Every subcommand prints the resolved
//! configuration and seed before running.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::behavior::{collect_dataset, drop_returns_above, filter_top_returns, keep_top_returns, PolicySpec};
use crate::config::RunConfig;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_components, ablation_csv, ablation_n, alignment_sweep, default_target_grid, parse_grid, safety_csv,
    safety_eval, write_text,
};
use crate::infer::{online_finetune, InferConfig};
use crate::io::{load_dataset, save_dataset};
use crate::model::{load_checkpoint, save_checkpoint, Network};
use crate::rng::rng_for;
use crate::train::gradcheck::{perturb, small_config};
use crate::train::{grad_check, mask_batch, train_model, Trainer};
use crate::trajectory::{sample_batch, Dataset};

#[derive(Debug, Parser)]
#[command(name = "retalign", version, about = "Target-return-aligned offline RL experiments")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` assignment applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; overrides train.seed, eval.seed and finetune.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterMode {
    Keep,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Default,
    Soc,
    Mixture,
    Epsgreedy,
}

/// Dataset and environment shared by the evaluation commands.
#[derive(Debug, Args)]
pub struct EvalTarget {
    /// Dataset the model was trained on; supplies r_max, gamma and the environment.
    #[arg(long)]
    pub data: PathBuf,
    /// Environment id, overriding the dataset's.
    #[arg(long)]
    pub env: Option<String>,
    /// Environment spec file, overriding both.
    #[arg(long)]
    pub env_spec: Option<PathBuf>,
    /// Target grid `start:stop:step`; defaults to nine points over 0.1..1.0 r_max.
    #[arg(long)]
    pub targets: Option<String>,
    /// Episodes per target (eval.episodes).
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect an offline dataset with a behavior policy.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long, value_enum, default_value = "default")]
        policy: PolicyKind,
        /// Exploration rate (soc, epsgreedy).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Per-step jitter (mixture).
        #[arg(long)]
        sigma: Option<f64>,
        /// Value step size (soc).
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the environment spec here.
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Keep or drop the top trajectories by return.
    FilterData {
        #[arg(value_enum)]
        mode: FilterMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "max_return")]
        percent: Option<f64>,
        /// Drop every trajectory with return above this value instead.
        #[arg(long, conflicts_with = "percent")]
        max_return: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines metrics log.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Training steps (train.total_steps).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Achieved return against target over a grid of targets.
    EvalAlign {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alignment error as a function of the candidate count.
    AblateN {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 5, 10, 100, 300])]
        n_list: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare the full method, autoregressive-only masking and plain conditioning.
    AblateComponents {
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean return and adverse events at fractions of r_max on a treatment env.
    EvalSafety {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.4f64, 0.8])]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online fine-tuning from a checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a small model.
    GradCheck {
        #[arg(long, default_value = "dial")]
        env: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5f64, 0.7, 0.9])]
        nu: Vec<f64>,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
    },
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
        cfg.finetune.seed = s;
    }
    Ok(cfg)
}

fn announce(cfg: &RunConfig, seed: u64) {
    let mut out = std::io::stdout().lock();
    for line in cfg.to_lines() {
        let _ = writeln!(out, "# {line}");
    }
    let _ = writeln!(out, "# seed = {seed}");
}

fn resolve_env(ds: &Dataset, id: Option<&str>, spec: Option<&Path>) -> Result<EnvSpec> {
    match (spec, id) {
        (Some(p), _) => EnvSpec::load(p),
        (None, Some(id)) => EnvSpec::from_id(id),
        (None, None) => EnvSpec::from_id(&ds.env_id),
    }
}

struct EvalSetup {
    ds: Dataset,
    env: EnvSpec,
    targets: Vec<f64>,
    episodes: usize,
    infer: InferConfig,
}

fn eval_setup(t: &EvalTarget, cfg: &RunConfig) -> Result<EvalSetup> {
    let ds = load_dataset(&t.data)?;
    let env = resolve_env(&ds, t.env.as_deref(), t.env_spec.as_deref())?;
    let targets = match &t.targets {
        Some(g) => parse_grid(g)?,
        None => default_target_grid(ds.r_max),
    };
    let infer = cfg.infer.resolve(ds.r_max, ds.gamma)?;
    Ok(EvalSetup { episodes: t.episodes.unwrap_or(cfg.eval.episodes), ds, env, targets, infer })
}

fn policy_spec(env: &EnvSpec, kind: PolicyKind, epsilon: Option<f64>, sigma: Option<f64>, alpha: Option<f64>) -> PolicySpec {
    let base = match kind {
        PolicyKind::Default => PolicySpec::default_for(env),
        PolicyKind::Soc => PolicySpec::Soc { alpha: 0.25, epsilon: 0.0 },
        PolicyKind::Mixture => PolicySpec::Mixture { sigma: 0.1 },
        PolicyKind::Epsgreedy => PolicySpec::EpsGreedy { epsilon: 0.3 },
    };
    match base {
        PolicySpec::Soc { alpha: a, epsilon: e } => PolicySpec::Soc { alpha: alpha.unwrap_or(a), epsilon: epsilon.unwrap_or(e) },
        PolicySpec::Mixture { sigma: s } => PolicySpec::Mixture { sigma: sigma.unwrap_or(s) },
        PolicySpec::EpsGreedy { epsilon: e } => PolicySpec::EpsGreedy { epsilon: epsilon.unwrap_or(e) },
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData { env, policy, epsilon, sigma, alpha, episodes, gamma, out, spec_out } => {
            let seed = cli.seed.unwrap_or(0);
            let spec = EnvSpec::from_id(env)?;
            let pol = policy_spec(&spec, *policy, *epsilon, *sigma, *alpha);
            println!("# env = {env}\n# policy = {pol:?}\n# episodes = {episodes}\n# gamma = {gamma}\n# seed = {seed}");
            let ds = collect_dataset(&spec, &pol, *episodes, *gamma, seed)?;
            save_dataset(&ds, out)?;
            if let Some(p) = spec_out {
                spec.save(p)?;
            }
            println!("{} trajectories, r_max {}", ds.len(), ds.r_max);
        }
        Command::FilterData { mode, data, percent, max_return, out } => {
            println!("# mode = {mode:?}\n# percent = {percent:?}\n# max_return = {max_return:?}\n# seed = none");
            let ds = load_dataset(data)?;
            let kept = match (mode, percent, max_return) {
                (FilterMode::Drop, _, Some(cap)) => drop_returns_above(&ds, *cap)?,
                (FilterMode::Keep, _, Some(_)) => return Err(Error::usage("--max-return only applies to drop")),
                (FilterMode::Drop, Some(p), None) => filter_top_returns(&ds, *p)?,
                (FilterMode::Keep, Some(p), None) => keep_top_returns(&ds, *p)?,
                (_, None, None) => return Err(Error::usage("need --percent or --max-return")),
            };
            save_dataset(&kept, out)?;
            println!("{} of {} trajectories kept, r_max {}", kept.len(), ds.len(), kept.r_max);
        }
        Command::Train { data, out, metrics, steps } => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.train.total_steps = *s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(*s);
            }
            announce(&cfg, cfg.train.seed);
            let ds = load_dataset(data)?;
            let (net, records) = train_model(&ds, cfg.model.clone(), &cfg.train, metrics.as_deref())?;
            save_checkpoint(&net, cfg.train.total_steps, cfg.train.seed, out)?;
            if let Some(last) = records.last() {
                println!("step {} loss {}", last.step, last.loss.total);
            }
        }
        Command::EvalAlign { checkpoint, target, out } => {
            announce(&cfg, cfg.eval.seed);
            let (net, _) = load_checkpoint::<f32, _>(checkpoint)?;
            let s = eval_setup(target, &cfg)?;
            let mut rep = alignment_sweep(&net, &s.env, &s.targets, s.episodes, &s.infer, cfg.eval.seed)?;
            rep.r_max = s.ds.r_max;
            write_text(out, &rep.to_csv())?;
            println!("{} targets, mean abs error {}", rep.rows.len(), rep.mean_abs_err());
        }
        Command::AblateN { checkpoint, target, n_list, out } => {
            announce(&cfg, cfg.eval.seed);
            if n_list.is_empty() {
                return Err(Error::usage("--n-list must not be empty"));
            }
            let (net, _) = load_checkpoint::<f32, _>(checkpoint)?;
            let s = eval_setup(target, &cfg)?;
            let rows = ablation_n(&net, &s.env, n_list, &s.targets, s.episodes, &s.infer, cfg.eval.seed)?;
            write_text(out, &ablation_csv(&rows))?;
        }
        Command::AblateComponents { target, seeds, out } => {
            announce(&cfg, cfg.eval.seed);
            let s = eval_setup(target, &cfg)?;
            let model = cfg.model.clone();
            let rep = ablation_components(&s.ds, &s.env, &model, &cfg.train, &s.targets, s.episodes, &s.infer, seeds)?;
            for (seed, errs) in seeds.iter().zip(&rep.per_seed) {
                println!("seed {seed}: full {} no_random_mask {} no_double_check {}", errs[0], errs[1], errs[2]);
            }
            write_text(out, &ablation_csv(&rep.rows))?;
        }
        Command::EvalSafety { checkpoint, target, fractions, out } => {
            announce(&cfg, cfg.eval.seed);
            let (net, _) = load_checkpoint::<f32, _>(checkpoint)?;
            let s = eval_setup(target, &cfg)?;
            let rows = fractions
                .iter()
                .map(|f| safety_eval(&net, &s.env, s.ds.r_max, *f, s.episodes, &s.infer, cfg.eval.seed))
                .collect::<Result<Vec<_>>>()?;
            write_text(out, &safety_csv(&rows))?;
        }
        Command::Finetune { checkpoint, data, env, out, report } => {
            announce(&cfg, cfg.finetune.seed);
            let (net, header) = load_checkpoint::<f32, _>(checkpoint)?;
            let ds = load_dataset(data)?;
            let spec = resolve_env(&ds, env.as_deref(), None)?;
            let mut trainer = Trainer::new(net, cfg.train.clone())?;
            let rep = online_finetune(&spec, &mut trainer, &ds, &cfg.finetune)?;
            save_checkpoint(&trainer.net, header.step + trainer.step, cfg.finetune.seed, out)?;
            if let Some(p) = report {
                let line = serde_json::to_string(&rep).expect("report serializes");
                write_text(p, &line)?;
            }
            if let Some(r) = rep.episode_returns.last() {
                println!("final episode return {r}, buffer {}", rep.buffer_sizes.last().copied().unwrap_or(0));
            }
        }
        Command::GradCheck { env, nu, gamma } => {
            let seed = cfg.train.seed;
            announce(&cfg, seed);
            let spec = EnvSpec::from_id(env)?;
            let ds = collect_dataset(&spec, &PolicySpec::default_for(&spec), 4, *gamma, seed)?;
            let model = small_config(ds.dims).fit_to(&ds);
            let mut net = Network::<f64>::new(model, seed)?;
            let mut rng = rng_for(seed, &[0x9c]);
            perturb(&mut net, 0.3, &mut rng);
            let batch = sample_batch(&ds, 4, net.config.context_len, &mut rng)?;
            let seqs = mask_batch(&batch, &cfg.train.mask, &mut rng);
            for v in nu {
                let rep = grad_check(&net, &seqs, *gamma, *v)?;
                println!("nu {v}: max relative error {:e} at {} ({} params)", rep.max_rel_err, rep.worst_param, rep.n_params);
                if !(rep.max_rel_err < 1e-4) {
                    return Err(Error::numeric(format!("gradient mismatch {:e} at nu {v}", rep.max_rel_err)));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for argv in [
            "retalign gen-data --env dial --episodes 5 --out d.jsonl",
            "retalign filter-data drop --data d --percent 10 --out e",
            "retalign filter-data drop --data d --max-return 14 --out e",
            "retalign train --data d --out c --set train.lr=1e-3 --seed 3",
            "retalign eval-align --checkpoint c --data d --targets 2:18:2 --out a.csv",
            "retalign ablate-n --checkpoint c --data d --n-list 2,2,300 --out n.csv",
            "retalign ablate-components --data d --seeds 0,1 --out x.csv",
            "retalign eval-safety --checkpoint c --data d --fractions 0.4 --out s.csv",
            "retalign finetune --checkpoint c --data d --out c2",
            "retalign grad-check --nu 0.7",
        ] {
            Cli::try_parse_from(argv.split(' ')).unwrap_or_else(|e| panic!("{argv}: {e}"));
        }
    }

    #[test]
    fn usage_problems_exit_two() {
        assert_eq!(main_with(["retalign", "train", "--bogus"]), 2);
        assert_eq!(main_with(["retalign", "fly"]), 2);
        assert_eq!(main_with(["retalign", "train", "--data", "d", "--out", "c", "--set", "train.nope=1"]), 2);
        assert_eq!(main_with(["retalign", "--help"]), 0);
    }

    #[test]
    fn missing_checkpoint_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        assert_eq!(
            main_with(["retalign", "gen-data", "--env", "dial", "--episodes", "3", "--out", data.to_str().unwrap()]),
            0
        );
        let missing = dir.path().join("absent.ckpt");
        let csv = dir.path().join("a.csv");
        let code = main_with([
            "retalign", "eval-align", "--checkpoint", missing.to_str().unwrap(),
            "--data", data.to_str().unwrap(), "--out", csv.to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }
}
