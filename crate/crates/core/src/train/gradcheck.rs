//! Central finite-difference verification of the analytic gradient.

use rand::Rng;
use serde::Serialize;

use super::loss::batch_loss;
use crate::error::{Error, Result};
use crate::model::{MaskedSequence, ModelConfig, Network};

pub const FD_STEP: f64 = 1e-5;
/// Above this many parameters a full sweep gets slow.
pub const MAX_PARAMS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Small model under [`MAX_PARAMS`] for modality shapes of `dims`.
pub fn small_config(dims: crate::ModalityDims) -> ModelConfig {
    let mut cfg = ModelConfig {
        context_len: 2,
        embed_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_dim: 8,
        dropout: 0.0,
        q_layers: 2,
        q_hidden: 4,
        ..Default::default()
    };
    cfg.set_dims(dims);
    cfg
}

/// Adds uniform noise in `[-scale, scale]` to every parameter, so that the
/// zero-initialized Q output layer does not hide the rest of the network.
pub fn perturb<R: Rng + ?Sized>(net: &mut Network<f64>, scale: f64, rng: &mut R) {
    for v in net.params.iter_mut() {
        *v += rng.random_range(-scale..=scale);
    }
}

/// Compares the analytic gradient of the total loss with central differences
/// for every parameter. The TD bootstrap values are frozen at the current
/// parameters, matching the stop-gradient of the analytic gradient.
pub fn grad_check(net: &Network<f64>, seqs: &[MaskedSequence], gamma: f64, nu: f64) -> Result<GradCheckReport> {
    if net.n_params() > MAX_PARAMS {
        return Err(Error::usage(format!(
            "gradient check limited to {MAX_PARAMS} parameters, model has {}",
            net.n_params()
        )));
    }
    let (out, cache) = net.forward_train(seqs, None)?;
    let frozen = out.q.clone();
    let (loss, _, head_grads) = batch_loss(&net.config, seqs, &out, gamma, nu, (1.0, 1.0), Some(&frozen));
    let grad = net.backward(&cache, &head_grads);

    let mut probe = net.clone();
    let objective = |n: &Network<f64>| -> Result<f64> {
        let o = n.forward_heads(seqs)?;
        Ok(batch_loss(&n.config, seqs, &o, gamma, nu, (1.0, 1.0), Some(&frozen)).0.total)
    };
    let mut worst = (0.0f64, 0usize);
    for i in 0..net.n_params() {
        let orig = probe.params[i];
        probe.params[i] = orig + FD_STEP;
        let up = objective(&probe)?;
        probe.params[i] = orig - FD_STEP;
        let down = objective(&probe)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = relative_error(grad[i], numeric);
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, i);
        }
    }
    let worst_param = net
        .layout
        .infos
        .iter()
        .find(|p| (p.offset..p.offset + p.len).contains(&worst.1))
        .map(|p| format!("{}[{}]", p.name, worst.1 - p.offset))
        .unwrap_or_default();
    Ok(GradCheckReport {
        n_params: net.n_params(),
        loss: loss.total,
        grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        max_rel_err: worst.0,
        worst_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::trajectory::{ActionKind, ModalityDims, SubTrajectory};
    use crate::train::mask::{make_mask, MaskMode};

    fn batch(dims: ModalityDims, k: usize, seed: u64) -> Vec<MaskedSequence> {
        let mut rng = rng_for(seed, &[]);
        (0..3)
            .map(|b| {
                let action = |rng: &mut rand_chacha::ChaCha8Rng| match dims.action_kind {
                    ActionKind::Continuous => vec![rng.random_range(-1.0..1.0)],
                    ActionKind::Discrete => vec![rng.random_range(0..dims.action_dim) as f64],
                };
                let w = SubTrajectory {
                    returns: (0..k).map(|_| rng.random_range(0.0..5.0)).collect(),
                    states: (0..k).map(|_| (0..dims.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                    actions: (0..k).map(|_| action(&mut rng)).collect(),
                    rewards: (0..k).map(|_| rng.random_range(0.0..1.0)).collect(),
                    pad: (0..k).map(|t| b == 2 && t == 0).collect(),
                    start: 0,
                    ends_episode: b == 1,
                };
                let mode = if b % 2 == 0 { MaskMode::Random } else { MaskMode::Autoregressive };
                let mask = make_mask(&w.pad, 0.5, mode, &mut rng);
                MaskedSequence::new(w, mask).unwrap()
            })
            .collect()
    }

    #[test]
    fn gradients_match_for_several_expectiles() {
        for kind in [ActionKind::Continuous, ActionKind::Discrete] {
            let dims = ModalityDims { state_dim: 2, action_dim: if kind == ActionKind::Discrete { 3 } else { 1 }, action_kind: kind };
            let cfg = small_config(dims);
            let mut net = Network::<f64>::new(cfg.clone(), 1).unwrap();
            assert!(net.n_params() <= MAX_PARAMS);
            perturb(&mut net, 0.3, &mut rng_for(2, &[]));
            let seqs = batch(dims, cfg.context_len, 4);
            for nu in [0.5, 0.7, 0.9] {
                let rep = grad_check(&net, &seqs, 0.9, nu).unwrap();
                assert!(rep.max_rel_err < 1e-4, "{kind:?} nu={nu}: {rep:?}");
            }
        }
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        // all targets zero and all heads output zero
        let dims = ModalityDims { state_dim: 1, action_dim: 1, action_kind: ActionKind::Continuous };
        let mut net = Network::<f64>::new(small_config(dims), 0).unwrap();
        for name in ["head.return.w", "head.state.w", "head.action.w"] {
            net.param_mut(name).unwrap().fill(0.0);
        }
        let w = SubTrajectory {
            returns: vec![0.0; 2],
            states: vec![vec![0.0]; 2],
            actions: vec![vec![0.0]; 2],
            rewards: vec![0.0; 2],
            pad: vec![false; 2],
            start: 0,
            ends_episode: true,
        };
        let rep = grad_check(&net, &[MaskedSequence::unmasked(w)], 0.99, 0.7).unwrap();
        assert_eq!(rep.loss, 0.0);
        assert!(rep.grad_norm < 1e-8);
    }

    #[test]
    fn oversized_models_are_refused() {
        let net = Network::<f64>::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(grad_check(&net, &[], 0.9, 0.7).unwrap_err().exit_code(), 2);
    }
}
