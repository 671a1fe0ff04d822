//! Joint optimization of the reconstruction and expectile TD objectives.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss, LossBreakdown};
use super::mask::{make_mask, MaskSchedule};
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::model::{MaskedSequence, ModelConfig, Network, Scalar};
use crate::rng::rng_for;
use crate::trajectory::{sample_positions, Dataset, SubTrajectory};

const TRAIN_STREAM: u64 = 0x7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Expectile of the TD loss.
    pub nu: f64,
    /// Discount used in the TD target; `None` takes the dataset's.
    pub gamma: Option<f64>,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub recon_weight: f64,
    pub q_weight: f64,
    pub optimizer: AdamWConfig,
    pub mask: MaskSchedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Cosine decay from `lr` to zero between the end of warmup and `total_steps`.
    pub cosine_decay: bool,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            nu: 0.7,
            gamma: None,
            lr: 1e-4,
            warmup_steps: 2_000,
            total_steps: 50_000,
            batch_size: 256,
            recon_weight: 1.0,
            q_weight: 1.0,
            optimizer: AdamWConfig::default(),
            mask: MaskSchedule::default(),
            grad_clip: 0.0,
            cosine_decay: false,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(format!("invalid training config: {m}")));
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return bad(format!("expectile {} outside (0, 1)", self.nu));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return bad(format!("gamma {g} outside [0, 1]"));
            }
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || !(self.lr >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("batch size must be positive, lr and grad_clip nonnegative".into());
        }
        self.mask.validate()
    }

    /// Linear warmup to `lr`, then constant or cosine-decayed.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay || self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Draws a mask ratio and mode for the batch and masks every window.
pub fn mask_batch(batch: &[SubTrajectory], schedule: &MaskSchedule, rng: &mut ChaCha8Rng) -> Vec<MaskedSequence> {
    let (ratio, mode) = schedule.draw(rng);
    batch
        .iter()
        .map(|w| MaskedSequence {
            mask: make_mask(&w.pad, ratio, mode, rng),
            window: w.clone(),
            bootstrap: None,
        })
        .collect()
}

/// Bootstrap values for every window slot from one evaluation pass over
/// unmasked windows. Slot `t` of the window that follows `batch[b]` holds
/// the step after slot `t` of `batch[b]`; a window that ends its episode has
/// no successor and reads from itself shifted by one.
pub fn bootstrap_values<F: Scalar>(
    net: &Network<F>,
    batch: &[SubTrajectory],
    next: &[Option<SubTrajectory>],
) -> Result<Vec<Vec<f64>>> {
    if batch.len() != next.len() {
        return Err(Error::usage(format!("{} windows but {} successors", batch.len(), next.len())));
    }
    let seqs: Vec<MaskedSequence> = batch
        .iter()
        .zip(next)
        .map(|(w, n)| MaskedSequence::unmasked(n.as_ref().unwrap_or(w).clone()))
        .collect();
    let out = net.forward_heads(&seqs)?;
    let k = net.config.context_len;
    Ok(next
        .iter()
        .enumerate()
        .map(|(b, n)| {
            let q = |t: usize| out.q[b * k + t].as_f64();
            match n {
                Some(_) => (0..k).map(q).collect(),
                None => (0..k).map(|t| if t + 1 < k { q(t + 1) } else { 0.0 }).collect(),
            }
        })
        .collect())
}

/// One optimizer update on `batch`, bootstrapping TD targets from the
/// successor windows `next`. Masks and dropout are drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Scalar>(
    net: &mut Network<F>,
    opt: &mut AdamW<F>,
    batch: &[SubTrajectory],
    next: &[Option<SubTrajectory>],
    cfg: &TrainConfig,
    gamma: f64,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let boot = bootstrap_values(net, batch, next).map_err(|e| Error::numeric(format!("step {step}: {e}")))?;
    let mut seqs = mask_batch(batch, &cfg.mask, rng);
    for (s, b) in seqs.iter_mut().zip(boot) {
        s.bootstrap = Some(b);
    }
    let drop_rng = if net.config.dropout > 0.0 { Some(rng) } else { None };
    let (out, cache) = net
        .forward_train(&seqs, drop_rng)
        .map_err(|e| Error::numeric(format!("step {step}: {e}")))?;
    let (loss, _, head_grads) = batch_loss(
        &net.config,
        &seqs,
        &out,
        gamma,
        cfg.nu,
        (cfg.recon_weight, cfg.q_weight),
        None,
    );
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss at step {step}: return {} state {} action {} q {}",
            loss.recon_return, loss.recon_state, loss.recon_action, loss.q_loss
        )));
    }
    let mut grad = net.backward(&cache, &head_grads);
    if cfg.grad_clip > 0.0 {
        let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient at step {step}")));
        }
        if norm > cfg.grad_clip {
            let s = F::of(cfg.grad_clip / norm);
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    opt.step(&mut net.params, &grad, cfg.lr_at(step));
    Ok(loss)
}

/// Loss of `net` on fixed, already-masked sequences (evaluation mode).
pub fn eval_loss<F: Scalar>(net: &Network<F>, seqs: &[MaskedSequence], gamma: f64, nu: f64) -> Result<LossBreakdown> {
    let out = net.forward_heads(seqs)?;
    Ok(batch_loss(&net.config, seqs, &out, gamma, nu, (1.0, 1.0), None).0)
}

/// Network plus optimizer state, advanced one seeded step at a time.
pub struct Trainer<F: Scalar> {
    pub net: Network<F>,
    pub opt: AdamW<F>,
    pub config: TrainConfig,
    pub step: u64,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(net: Network<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(config.optimizer, &net.layout);
        Ok(Self { net, opt, config, step: 0 })
    }

    /// Samples a batch from `ds` and takes one step. The batch, masks and
    /// dropout all come from a stream derived from `(seed, step)`.
    pub fn step_on(&mut self, ds: &Dataset) -> Result<LossBreakdown> {
        let gamma = self.config.gamma.unwrap_or(ds.gamma);
        let mut rng = rng_for(self.config.seed, &[TRAIN_STREAM, self.step]);
        let k = self.net.config.context_len;
        let mut batch = Vec::with_capacity(self.config.batch_size);
        let mut next = Vec::with_capacity(self.config.batch_size);
        for (i, end) in sample_positions(ds, self.config.batch_size, &mut rng)? {
            let traj = &ds.trajectories[i];
            batch.push(SubTrajectory::ending_at(traj, end, k)?);
            next.push(if end + 1 < traj.len() { Some(SubTrajectory::ending_at(traj, end + 1, k)?) } else { None });
        }
        let loss = train_step(&mut self.net, &mut self.opt, &batch, &next, &self.config, gamma, self.step, &mut rng)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs `steps` updates, reporting every `log_every`-th step and the last one.
    pub fn run(&mut self, ds: &Dataset, steps: u64, mut log: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<LossBreakdown> {
        let mut last = LossBreakdown::default();
        for i in 0..steps {
            let step = self.step;
            last = self.step_on(ds)?;
            let every = self.config.log_every.max(1);
            if step % every == 0 || i + 1 == steps {
                log(&MetricsRecord {
                    step,
                    lr: self.config.lr_at(step),
                    loss: last,
                })?;
            }
        }
        Ok(last)
    }
}

/// Fits normalization to `ds`, builds a fresh model and trains it for
/// `train.total_steps`, optionally writing the metrics log as JSON lines.
pub fn train_model(
    ds: &Dataset,
    model: ModelConfig,
    train: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<(Network<f32>, Vec<MetricsRecord>)> {
    let model = model.fit_to(ds);
    let net = Network::<f32>::new(model, train.seed)?;
    let mut trainer = Trainer::new(net, train.clone())?;
    let mut records = Vec::new();
    let mut file = match metrics_path {
        Some(p) => Some((
            p.to_path_buf(),
            std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        )),
        None => None,
    };
    trainer.run(ds, train.total_steps, |rec| {
        if let Some((p, f)) = file.as_mut() {
            let line = serde_json::to_string(rec).expect("metrics serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        records.push(rec.clone());
        Ok(())
    })?;
    if let Some((p, mut f)) = file {
        f.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok((trainer.net, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{collect_dataset, PolicySpec};
    use crate::trajectory::sample_batch;
    use crate::envs::EnvSpec;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            context_len: 4,
            embed_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 32,
            dropout: 0.0,
            q_hidden: 16,
            ..Default::default()
        }
    }

    fn dial_data(n: usize) -> Dataset {
        let env = EnvSpec::from_id("dial").unwrap();
        collect_dataset(&env, &PolicySpec::default_for(&env), n, 1.0, 3).unwrap()
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig { lr: 1.0, warmup_steps: 4, total_steps: 10, ..Default::default() };
        assert_eq!(c.lr_at(0), 0.25);
        assert_eq!(c.lr_at(3), 1.0);
        assert_eq!(c.lr_at(9), 1.0);
        let c = TrainConfig { cosine_decay: true, ..c };
        assert_eq!(c.lr_at(3), 1.0);
        assert!((c.lr_at(7) - 0.5).abs() < 1e-12);
        assert!(c.lr_at(10).abs() < 1e-12 && c.lr_at(20).abs() < 1e-12);
        assert!(TrainConfig { warmup_steps: 11, total_steps: 10, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { nu: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_rate_leaves_params_unchanged() {
        let ds = dial_data(10);
        let net = Network::<f32>::new(tiny_model().fit_to(&ds), 0).unwrap();
        let before = net.params.clone();
        let cfg = TrainConfig { lr: 0.0, batch_size: 8, warmup_steps: 0, ..Default::default() };
        let mut t = Trainer::new(net, cfg).unwrap();
        t.step_on(&ds).unwrap();
        t.step_on(&ds).unwrap();
        assert_eq!(t.net.params, before);
    }

    #[test]
    fn identical_seed_and_batch_give_identical_params() {
        let ds = dial_data(10);
        let cfg = TrainConfig { lr: 1e-3, batch_size: 8, warmup_steps: 0, ..Default::default() };
        let run = || {
            let net = Network::<f32>::new(tiny_model().fit_to(&ds), 5).unwrap();
            let mut t = Trainer::new(net, cfg.clone()).unwrap();
            for _ in 0..3 {
                t.step_on(&ds).unwrap();
            }
            t.net.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_dial_data() {
        let ds = dial_data(50);
        let model = tiny_model().fit_to(&ds);
        let cfg = TrainConfig { lr: 1e-3, batch_size: 32, warmup_steps: 10, total_steps: 200, ..Default::default() };
        let mut rng = rng_for(99, &[]);
        let fixed = sample_batch(&ds, 64, model.context_len, &mut rng).unwrap();
        let fixed = mask_batch(&fixed, &cfg.mask, &mut rng);
        let net = Network::<f32>::new(model, 1).unwrap();
        let before = eval_loss(&net, &fixed, 1.0, cfg.nu).unwrap().total;
        let mut t = Trainer::new(net, cfg).unwrap();
        t.run(&ds, 200, |_| Ok(())).unwrap();
        let after = eval_loss(&t.net, &fixed, 1.0, 0.7).unwrap().total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn bootstrap_reads_successor_or_shifts_within_window() {
        let ds = dial_data(3);
        let net = Network::<f32>::new(tiny_model().fit_to(&ds), 2).unwrap();
        let mut net = net;
        for (i, v) in net.params.iter_mut().enumerate() {
            *v += ((i % 7) as f32 - 3.0) * 0.01;
        }
        let traj = &ds.trajectories[0];
        let cur = SubTrajectory::ending_at(traj, 5, 4).unwrap();
        let succ = SubTrajectory::ending_at(traj, 6, 4).unwrap();
        let q_of = |w: &SubTrajectory| {
            let out = net.forward_heads(&[MaskedSequence::unmasked(w.clone())]).unwrap();
            out.q.iter().map(|v| v.as_f64()).collect::<Vec<_>>()
        };
        let boot = bootstrap_values(&net, &[cur.clone(), cur.clone()], &[Some(succ.clone()), None]).unwrap();
        assert_eq!(boot[0], q_of(&succ));
        let own = q_of(&cur);
        assert_eq!(boot[1], vec![own[1], own[2], own[3], 0.0]);
        assert!(bootstrap_values(&net, &[cur], &[]).is_err());
    }

    #[test]
    fn metrics_log_is_json_lines() {
        let ds = dial_data(5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.jsonl");
        let cfg = TrainConfig { lr: 1e-3, batch_size: 4, warmup_steps: 0, total_steps: 5, log_every: 2, ..Default::default() };
        let (_, recs) = train_model(&ds, tiny_model(), &cfg, Some(&p)).unwrap();
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 4]);
        let text = std::fs::read_to_string(&p).unwrap();
        let back: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, recs);
        assert!(text.lines().next().unwrap().contains("\"q_loss\""));
    }
}
