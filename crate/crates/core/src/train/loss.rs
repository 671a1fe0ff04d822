//! Reconstruction and expectile TD losses with their gradients w.r.t. the
//! network's head outputs. Everything is accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::model::{HeadGrads, HeadOutput, MaskedSequence, ModelConfig, Scalar};
use crate::trajectory::ActionKind;

/// `|nu - 1(u < 0)|`; at `u = 0` the weight is `nu`.
pub fn expectile_weight(u: f64, nu: f64) -> f64 {
    if u < 0.0 {
        1.0 - nu
    } else {
        nu
    }
}

pub fn expectile_loss(u: f64, nu: f64) -> f64 {
    expectile_weight(u, nu) * u * u
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_return: f64,
    pub recon_state: f64,
    pub recon_action: f64,
    pub q_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(recon_return: f64, recon_state: f64, recon_action: f64, q_loss: f64) -> Self {
        Self {
            recon_return,
            recon_state,
            recon_action,
            q_loss,
            total: recon_return + recon_state + recon_action + q_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.recon_return, self.recon_state, self.recon_action, self.q_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Sum of expectile TD terms over one window and the number of terms.
///
/// `q[t]` is the prediction at timestep `t` and `next[t + 1]` the
/// (gradient-free) bootstrap for the pair `(t, t+1)`. A pair needs both steps
/// inside the window and unpadded; the last step contributes with a zero
/// bootstrap only when the window ends the episode.
pub fn q_loss_window(
    q: &[f64],
    next: &[f64],
    rewards: &[f64],
    pad: &[bool],
    ends_episode: bool,
    gamma: f64,
    nu: f64,
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    let k = q.len();
    let in_window = |t: usize| (t + 1 < k && !pad[t + 1]).then(|| next[t + 1]);
    for (_, u) in td_residuals(q, rewards, pad, ends_episode, gamma, in_window) {
        sum += expectile_loss(u, nu);
        n += 1;
    }
    (sum, n)
}

/// `(t, u_t)` for every unpadded step with a target. `after(t)` is the
/// bootstrap value of the step following `t`, if known.
fn td_residuals(
    q: &[f64],
    rewards: &[f64],
    pad: &[bool],
    ends_episode: bool,
    gamma: f64,
    after: impl Fn(usize) -> Option<f64>,
) -> Vec<(usize, f64)> {
    let k = q.len();
    (0..k)
        .filter_map(|t| {
            if pad[t] {
                None
            } else if t + 1 == k && ends_episode {
                Some((t, rewards[t] - q[t]))
            } else {
                after(t).map(|v| (t, rewards[t] + gamma * v - q[t]))
            }
        })
        .collect()
}

/// Pooled reconstruction terms `(return, state, action)` over every unpadded
/// timestep of the batch, in normalized units.
pub fn recon_losses<F: Scalar>(cfg: &ModelConfig, seqs: &[MaskedSequence], out: &HeadOutput<F>) -> (f64, f64, f64) {
    let (l, _) = recon_with_grads(cfg, seqs, out, None);
    l
}

fn recon_with_grads<F: Scalar>(
    cfg: &ModelConfig,
    seqs: &[MaskedSequence],
    out: &HeadOutput<F>,
    mut grads: Option<&mut HeadGrads<F>>,
) -> ((f64, f64, f64), usize) {
    let k = cfg.context_len;
    let (sd, ad) = (cfg.state_dim, cfg.action_out());
    let n_real: usize = seqs.iter().map(|s| k - s.window.n_pad()).sum();
    if n_real == 0 {
        return ((0.0, 0.0, 0.0), 0);
    }
    let inv_n = 1.0 / n_real as f64;
    let inv_scale = 1.0 / cfg.return_scale;
    let (mut lr, mut ls, mut la) = (0.0, 0.0, 0.0);
    for (b, seq) in seqs.iter().enumerate() {
        let w = &seq.window;
        for t in 0..k {
            if w.pad[t] {
                continue;
            }
            let row = b * k + t;
            let e = out.ret[row].as_f64() - w.returns[t] * inv_scale;
            lr += e * e;
            if let Some(g) = grads.as_deref_mut() {
                g.ret[row] = F::of(2.0 * e * inv_n);
            }
            for j in 0..sd {
                let target = (w.states[t][j] - cfg.state_mean[j]) / cfg.state_std[j];
                let e = out.state[row * sd + j].as_f64() - target;
                ls += e * e / sd as f64;
                if let Some(g) = grads.as_deref_mut() {
                    g.state[row * sd + j] = F::of(2.0 * e * inv_n / sd as f64);
                }
            }
            let logits = &out.act[row * ad..(row + 1) * ad];
            match cfg.action_kind {
                ActionKind::Continuous => {
                    for j in 0..ad {
                        let e = logits[j].as_f64() - w.actions[t][j];
                        la += e * e / ad as f64;
                        if let Some(g) = grads.as_deref_mut() {
                            g.act[row * ad + j] = F::of(2.0 * e * inv_n / ad as f64);
                        }
                    }
                }
                ActionKind::Discrete => {
                    let target = w.actions[t][0] as usize;
                    let mx = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|v| (v.as_f64() - mx).exp()).sum();
                    let lse = mx + z.ln();
                    la += lse - logits[target].as_f64();
                    if let Some(g) = grads.as_deref_mut() {
                        for j in 0..ad {
                            let p = (logits[j].as_f64() - lse).exp();
                            let y = if j == target { 1.0 } else { 0.0 };
                            g.act[row * ad + j] = F::of((p - y) * inv_n);
                        }
                    }
                }
            }
        }
    }
    ((lr * inv_n, ls * inv_n, la * inv_n), n_real)
}

/// Expectile TD loss pooled over every valid pair in the batch, with `q`
/// in normalized units. Sequences carrying their own bootstrap values use
/// those. Otherwise `frozen` replaces the bootstrap values (same layout as
/// `out.q`), and by default they are read from `out.q` itself.
pub fn q_loss_batch<F: Scalar>(
    cfg: &ModelConfig,
    seqs: &[MaskedSequence],
    out: &HeadOutput<F>,
    gamma: f64,
    nu: f64,
    frozen: Option<&[f64]>,
    grads: Option<&mut HeadGrads<F>>,
) -> f64 {
    let k = cfg.context_len;
    let inv_scale = 1.0 / cfg.return_scale;
    let q: Vec<f64> = out.q.iter().map(|v| v.as_f64()).collect();
    let next = frozen.unwrap_or(&q);
    let mut terms = Vec::new();
    for (b, seq) in seqs.iter().enumerate() {
        let w = &seq.window;
        let r: Vec<f64> = w.rewards.iter().map(|v| v * inv_scale).collect();
        let qb = &q[b * k..(b + 1) * k];
        let nb = &next[b * k..(b + 1) * k];
        let residuals = match &seq.bootstrap {
            Some(boot) => td_residuals(qb, &r, &w.pad, w.ends_episode, gamma, |t| Some(boot[t])),
            None => td_residuals(qb, &r, &w.pad, w.ends_episode, gamma, |t| {
                (t + 1 < k && !w.pad[t + 1]).then(|| nb[t + 1])
            }),
        };
        for (t, u) in residuals {
            terms.push((b * k + t, u));
        }
    }
    if terms.is_empty() {
        return 0.0;
    }
    let inv_n = 1.0 / terms.len() as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for (row, u) in terms {
        total += expectile_loss(u, nu);
        if let Some(g) = grads.as_deref_mut() {
            g.q[row] = F::of(-2.0 * expectile_weight(u, nu) * u * inv_n);
        }
    }
    total * inv_n
}

/// Full objective and its gradient w.r.t. the head outputs. The reported
/// components are unweighted; `weights = (recon, q)` scales the gradient and
/// the returned weighted total.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<F: Scalar>(
    cfg: &ModelConfig,
    seqs: &[MaskedSequence],
    out: &HeadOutput<F>,
    gamma: f64,
    nu: f64,
    weights: (f64, f64),
    frozen: Option<&[f64]>,
) -> (LossBreakdown, f64, HeadGrads<F>) {
    let mut g = HeadGrads::zeros_like(out);
    let ((lr, ls, la), _) = recon_with_grads(cfg, seqs, out, Some(&mut g));
    let lq = q_loss_batch(cfg, seqs, out, gamma, nu, frozen, Some(&mut g));
    let (wr, wq) = weights;
    if wr != 1.0 {
        for v in g.ret.iter_mut().chain(&mut g.state).chain(&mut g.act) {
            *v *= F::of(wr);
        }
    }
    if wq != 1.0 {
        for v in g.q.iter_mut() {
            *v *= F::of(wq);
        }
    }
    let breakdown = LossBreakdown::from_parts(lr, ls, la, lq);
    let weighted = wr * (lr + ls + la) + wq * lq;
    (breakdown, weighted, g)
}
