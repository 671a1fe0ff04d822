//! Encoder-decoder transformer over `3K` (return, state, action) tokens with
//! per-modality reconstruction heads and one Q head per timestep.
//!
//! Forward and backward passes are written by hand over flat row-major
//! buffers. Pad tokens are never used as attention keys, and every sequence in
//! a batch is processed with the same fixed summation order, so a batched
//! forward pass equals a loop of single-sequence passes bit for bit.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::kernels::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LnCache};
use super::params::{DecayGroup, Init, Layout, ParamId};
use super::scalar::Scalar;
use super::sequence::MaskedSequence;
use crate::error::{Error, Result};
use crate::trajectory::ActionKind;

const INIT_STD: f64 = 0.02;

const VISIBLE: u8 = 0;
const MASKED: u8 = 1;
const PAD: u8 = 2;

#[derive(Debug, Clone)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
}

#[derive(Debug, Clone)]
struct DenseIds {
    w: ParamId,
    b: ParamId,
    d_in: usize,
    d_out: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    emb_ret: DenseIds,
    emb_state: DenseIds,
    emb_act: DenseIds,
    pos: ParamId,
    mask_emb: ParamId,
    pad_emb: ParamId,
    enc: Vec<BlockIds>,
    enc_ln_g: ParamId,
    enc_ln_b: ParamId,
    dec: Vec<BlockIds>,
    dec_ln_g: ParamId,
    dec_ln_b: ParamId,
    head_ret: DenseIds,
    head_state: DenseIds,
    head_act: DenseIds,
    /// `q[t]` is the MLP reading the action-slot latent of timestep `t`.
    q: Vec<Vec<DenseIds>>,
}

fn dense(layout: &mut Layout, name: &str, d_in: usize, d_out: usize, w_init: Init, decay: DecayGroup) -> DenseIds {
    let w = layout.add(format!("{name}.w"), &[d_in, d_out], w_init, decay);
    let b = layout.add(format!("{name}.b"), &[d_out], Init::Zeros, DecayGroup::None);
    DenseIds { w, b, d_in, d_out }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Ids) {
    let mut l = Layout::default();
    let d = cfg.embed_dim;
    let tn = Init::TruncNormal(INIT_STD);
    let tr = DecayGroup::Transformer;
    let emb_ret = dense(&mut l, "embed.return", 1, d, tn, tr);
    let emb_state = dense(&mut l, "embed.state", cfg.state_dim, d, tn, tr);
    let emb_act = dense(&mut l, "embed.action", cfg.action_dim, d, tn, tr);
    let pos = l.add("embed.position", &[cfg.seq_len(), d], tn, DecayGroup::None);
    let mask_emb = l.add("embed.mask", &[d], tn, DecayGroup::None);
    let pad_emb = l.add("embed.pad", &[d], tn, DecayGroup::None);

    let block = |l: &mut Layout, name: String| BlockIds {
        ln1_g: l.add(format!("{name}.ln1.g"), &[d], Init::Ones, DecayGroup::None),
        ln1_b: l.add(format!("{name}.ln1.b"), &[d], Init::Zeros, DecayGroup::None),
        w_qkv: l.add(format!("{name}.attn.qkv.w"), &[d, 3 * d], tn, tr),
        b_qkv: l.add(format!("{name}.attn.qkv.b"), &[3 * d], Init::Zeros, DecayGroup::None),
        w_o: l.add(format!("{name}.attn.out.w"), &[d, d], tn, tr),
        b_o: l.add(format!("{name}.attn.out.b"), &[d], Init::Zeros, DecayGroup::None),
        ln2_g: l.add(format!("{name}.ln2.g"), &[d], Init::Ones, DecayGroup::None),
        ln2_b: l.add(format!("{name}.ln2.b"), &[d], Init::Zeros, DecayGroup::None),
        w_ff1: l.add(format!("{name}.ff1.w"), &[d, cfg.ff_dim], tn, tr),
        b_ff1: l.add(format!("{name}.ff1.b"), &[cfg.ff_dim], Init::Zeros, DecayGroup::None),
        w_ff2: l.add(format!("{name}.ff2.w"), &[cfg.ff_dim, d], tn, tr),
        b_ff2: l.add(format!("{name}.ff2.b"), &[d], Init::Zeros, DecayGroup::None),
    };
    let enc = (0..cfg.encoder_layers)
        .map(|i| block(&mut l, format!("encoder.{i}")))
        .collect();
    let enc_ln_g = l.add("encoder.ln.g", &[d], Init::Ones, DecayGroup::None);
    let enc_ln_b = l.add("encoder.ln.b", &[d], Init::Zeros, DecayGroup::None);
    let dec = (0..cfg.decoder_layers)
        .map(|i| block(&mut l, format!("decoder.{i}")))
        .collect();
    let dec_ln_g = l.add("decoder.ln.g", &[d], Init::Ones, DecayGroup::None);
    let dec_ln_b = l.add("decoder.ln.b", &[d], Init::Zeros, DecayGroup::None);

    let head_ret = dense(&mut l, "head.return", d, 1, tn, tr);
    let head_state = dense(&mut l, "head.state", d, cfg.state_dim, tn, tr);
    let head_act = dense(&mut l, "head.action", d, cfg.action_out(), tn, tr);

    let mut q = Vec::with_capacity(cfg.context_len);
    for t in 0..cfg.context_len {
        let mut layers = Vec::with_capacity(cfg.q_layers);
        let mut d_in = d;
        for i in 0..cfg.q_layers {
            let last = i + 1 == cfg.q_layers;
            let d_out = if last { 1 } else { cfg.q_hidden };
            let init = if last { Init::Zeros } else { tn };
            layers.push(dense(&mut l, &format!("q.{t}.{i}"), d_in, d_out, init, DecayGroup::QHead));
            d_in = d_out;
        }
        q.push(layers);
    }
    let ids = Ids {
        emb_ret,
        emb_state,
        emb_act,
        pos,
        mask_emb,
        pad_emb,
        enc,
        enc_ln_g,
        enc_ln_b,
        dec,
        dec_ln_g,
        dec_ln_b,
        head_ret,
        head_state,
        head_act,
        q,
    };
    (l, ids)
}

/// Two disjoint mutable views into one gradient buffer.
fn pair_mut<F>(buf: &mut [F], a: Range<usize>, b: Range<usize>) -> (&mut [F], &mut [F]) {
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        let bb = &mut lo[b];
        (&mut hi[..a.end - a.start], bb)
    }
}

/// Model inputs after normalization, one entry per window timestep.
struct Inputs<F> {
    nb: usize,
    kind: Vec<u8>,
    ret: Vec<F>,
    state: Vec<F>,
    act: Vec<F>,
    key_ok: Vec<bool>,
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    att: Vec<F>,
    drop1: Option<Vec<F>>,
    ln2: LnCache<F>,
    h2: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
    drop2: Option<Vec<F>>,
}

/// Intermediate activations kept for [`Network::backward`].
pub struct Cache<F> {
    inputs: Inputs<F>,
    enc: Vec<BlockCache<F>>,
    enc_ln: LnCache<F>,
    dec: Vec<BlockCache<F>>,
    dec_ln: LnCache<F>,
    z: Vec<F>,
    /// Per timestep, the input of every Q-head layer.
    q_acts: Vec<Vec<Vec<F>>>,
}

/// Head outputs in normalized units, flattened as `[batch][timestep][..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<F> {
    pub batch: usize,
    pub context_len: usize,
    pub ret: Vec<F>,
    pub state: Vec<F>,
    pub act: Vec<F>,
    pub q: Vec<F>,
}

/// Gradients of the loss with respect to [`HeadOutput`] fields.
#[derive(Debug, Clone)]
pub struct HeadGrads<F> {
    pub ret: Vec<F>,
    pub state: Vec<F>,
    pub act: Vec<F>,
    pub q: Vec<F>,
}

impl<F: Scalar> HeadGrads<F> {
    pub fn zeros_like(h: &HeadOutput<F>) -> Self {
        Self {
            ret: vec![F::zero(); h.ret.len()],
            state: vec![F::zero(); h.state.len()],
            act: vec![F::zero(); h.act.len()],
            q: vec![F::zero(); h.q.len()],
        }
    }
}

/// One sequence's outputs in environment units.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Final latent per token, `3K x embed_dim`.
    pub latent: Vec<Vec<f64>>,
    pub returns: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Continuous actions, or logits for discrete actions.
    pub actions: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub pad: Vec<bool>,
}

impl ModelOutput {
    /// Action-value estimate at window timestep `t`.
    pub fn q_value(&self, t: usize) -> Result<f64> {
        if t >= self.q.len() {
            return Err(Error::usage(format!("timestep {t} outside window of {}", self.q.len())));
        }
        if self.pad[t] {
            return Err(Error::usage(format!("timestep {t} is padding")));
        }
        Ok(self.q[t])
    }
}

#[derive(Debug, Clone)]
pub struct Network<F: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    ids: Ids,
    pub params: Vec<F>,
}

impl<F: Scalar> Network<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, ids) = build_layout(&config);
        let mut rng = crate::rng::rng_for(seed, &[0x1417]);
        let params = layout.init(&mut rng);
        Ok(Self { config, layout, ids, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let (layout, ids) = build_layout(&config);
        if params.len() != layout.total {
            return Err(Error::usage(format!(
                "parameter vector has {} entries, config needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { config, layout, ids, params })
    }

    /// Parameter count implied by `config`.
    pub fn count_params(config: &ModelConfig) -> usize {
        build_layout(config).0.total
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            config: self.config.clone(),
            layout: self.layout.clone(),
            ids: self.ids.clone(),
            params: self.params.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    #[inline]
    fn p(&self, id: ParamId) -> &[F] {
        &self.params[self.layout.range(id)]
    }

    pub fn param(&self, name: &str) -> Option<&[F]> {
        self.layout.find(name).map(|id| self.p(id))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let id = self.layout.find(name)?;
        let r = self.layout.range(id);
        Some(&mut self.params[r])
    }

    fn encode(&self, seqs: &[MaskedSequence]) -> Result<Inputs<F>> {
        let cfg = &self.config;
        let k = cfg.context_len;
        let (sd, ad) = (cfg.state_dim, cfg.action_dim);
        let nb = seqs.len();
        let mut inp = Inputs {
            nb,
            kind: vec![VISIBLE; nb * 3 * k],
            ret: vec![F::zero(); nb * k],
            state: vec![F::zero(); nb * k * sd],
            act: vec![F::zero(); nb * k * ad],
            key_ok: vec![true; nb * 3 * k],
        };
        let inv_scale = 1.0 / cfg.return_scale;
        for (b, seq) in seqs.iter().enumerate() {
            let w = &seq.window;
            if w.context_len() != k || seq.mask.len() != 3 * k {
                return Err(Error::usage(format!(
                    "sequence {b} has context length {}, model expects {k}",
                    w.context_len()
                )));
            }
            for t in 0..k {
                let row = b * k + t;
                for m in 0..3 {
                    let s = 3 * t + m;
                    let kind = if w.pad[t] {
                        PAD
                    } else if seq.mask[s] {
                        MASKED
                    } else {
                        VISIBLE
                    };
                    inp.kind[b * 3 * k + s] = kind;
                    inp.key_ok[b * 3 * k + s] = kind != PAD;
                    if kind != VISIBLE {
                        continue;
                    }
                    match m {
                        0 => inp.ret[row] = F::of(w.returns[t] * inv_scale),
                        1 => {
                            let st = &w.states[t];
                            if st.len() != sd {
                                return Err(Error::usage(format!(
                                    "sequence {b} state has {} dims, model expects {sd}",
                                    st.len()
                                )));
                            }
                            for j in 0..sd {
                                inp.state[row * sd + j] =
                                    F::of((st[j] - cfg.state_mean[j]) / cfg.state_std[j]);
                            }
                        }
                        _ => {
                            let a = &w.actions[t];
                            match cfg.action_kind {
                                ActionKind::Continuous => {
                                    if a.len() != ad {
                                        return Err(Error::usage(format!(
                                            "sequence {b} action has {} dims, model expects {ad}",
                                            a.len()
                                        )));
                                    }
                                    for j in 0..ad {
                                        inp.act[row * ad + j] = F::of(a[j]);
                                    }
                                }
                                ActionKind::Discrete => {
                                    let idx = a.first().copied().unwrap_or(-1.0);
                                    if a.len() != 1 || idx < 0.0 || idx.fract() != 0.0 || idx as usize >= ad {
                                        return Err(Error::usage(format!(
                                            "sequence {b} holds invalid discrete action {a:?}"
                                        )));
                                    }
                                    inp.act[row * ad + idx as usize] = F::one();
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(inp)
    }

    fn embed_inputs(&self, inp: &Inputs<F>) -> Vec<F> {
        let cfg = &self.config;
        let (k, d) = (cfg.context_len, cfg.embed_dim);
        let l = 3 * k;
        let nb = inp.nb;
        let ids = &self.ids;
        let er = linear(&inp.ret, self.p(ids.emb_ret.w), self.p(ids.emb_ret.b), nb * k, 1, d);
        let es = linear(&inp.state, self.p(ids.emb_state.w), self.p(ids.emb_state.b), nb * k, cfg.state_dim, d);
        let ea = linear(&inp.act, self.p(ids.emb_act.w), self.p(ids.emb_act.b), nb * k, cfg.action_dim, d);
        let pos = self.p(ids.pos);
        let mask = self.p(ids.mask_emb);
        let pad = self.p(ids.pad_emb);
        let mut x = vec![F::zero(); nb * l * d];
        for b in 0..nb {
            for s in 0..l {
                let row = b * l + s;
                let src: &[F] = match inp.kind[row] {
                    PAD => pad,
                    MASKED => mask,
                    _ => {
                        let r = (b * k + s / 3) * d;
                        match s % 3 {
                            0 => &er[r..r + d],
                            1 => &es[r..r + d],
                            _ => &ea[r..r + d],
                        }
                    }
                };
                let out = &mut x[row * d..(row + 1) * d];
                let p = &pos[s * d..(s + 1) * d];
                for j in 0..d {
                    out[j] = src[j] + p[j];
                }
            }
        }
        x
    }

    /// Token embeddings (`batch * 3K x embed_dim`) before the first block.
    pub fn embed(&self, seqs: &[MaskedSequence]) -> Result<Vec<F>> {
        let inp = self.encode(seqs)?;
        Ok(self.embed_inputs(&inp))
    }

    fn dropout_mask(&self, n: usize, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<F>> {
        let p = self.config.dropout;
        let rng = rng?;
        if p <= 0.0 {
            return None;
        }
        let keep = F::of(1.0 / (1.0 - p));
        Some(
            (0..n)
                .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
                .collect(),
        )
    }

    fn attention(&self, qkv: &[F], key_ok: &[bool], nb: usize) -> (Vec<F>, Vec<F>) {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let hd = d / h;
        let l = self.config.seq_len();
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut att = vec![F::zero(); nb * l * d];
        let mut probs = vec![F::zero(); nb * h * l * l];
        let mut scores = vec![F::zero(); l];
        for b in 0..nb {
            let ok = &key_ok[b * l..(b + 1) * l];
            for head in 0..h {
                let qo = head * hd;
                for i in 0..l {
                    let qi = &qkv[(b * l + i) * 3 * d + qo..][..hd];
                    let mut mx = F::neg_infinity();
                    for j in 0..l {
                        if !ok[j] {
                            continue;
                        }
                        let kj = &qkv[(b * l + j) * 3 * d + d + qo..][..hd];
                        let mut s = F::zero();
                        for c in 0..hd {
                            s += qi[c] * kj[c];
                        }
                        s *= scale;
                        scores[j] = s;
                        if s > mx {
                            mx = s;
                        }
                    }
                    let pr = &mut probs[((b * h + head) * l + i) * l..][..l];
                    let mut sum = F::zero();
                    for j in 0..l {
                        if ok[j] {
                            let e = (scores[j] - mx).exp();
                            pr[j] = e;
                            sum += e;
                        }
                    }
                    if sum > F::zero() {
                        let inv = F::one() / sum;
                        for v in pr.iter_mut() {
                            *v *= inv;
                        }
                    }
                    let out = &mut att[(b * l + i) * d + qo..][..hd];
                    for j in 0..l {
                        let pj = pr[j];
                        if pj == F::zero() {
                            continue;
                        }
                        let vj = &qkv[(b * l + j) * 3 * d + 2 * d + qo..][..hd];
                        for c in 0..hd {
                            out[c] += pj * vj[c];
                        }
                    }
                }
            }
        }
        (att, probs)
    }

    fn attention_backward(&self, qkv: &[F], probs: &[F], d_att: &[F], key_ok: &[bool], nb: usize) -> Vec<F> {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let hd = d / h;
        let l = self.config.seq_len();
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut dqkv = vec![F::zero(); qkv.len()];
        let mut dp = vec![F::zero(); l];
        for b in 0..nb {
            let ok = &key_ok[b * l..(b + 1) * l];
            for head in 0..h {
                let qo = head * hd;
                for i in 0..l {
                    let pr = &probs[((b * h + head) * l + i) * l..][..l];
                    let dout = &d_att[(b * l + i) * d + qo..][..hd];
                    let mut dot = F::zero();
                    for j in 0..l {
                        if !ok[j] {
                            dp[j] = F::zero();
                            continue;
                        }
                        let vj = &qkv[(b * l + j) * 3 * d + 2 * d + qo..][..hd];
                        let mut s = F::zero();
                        for c in 0..hd {
                            s += dout[c] * vj[c];
                        }
                        dp[j] = s;
                        dot += pr[j] * s;
                        let dv = &mut dqkv[(b * l + j) * 3 * d + 2 * d + qo..][..hd];
                        for c in 0..hd {
                            dv[c] += pr[j] * dout[c];
                        }
                    }
                    for j in 0..l {
                        if !ok[j] {
                            continue;
                        }
                        let ds = pr[j] * (dp[j] - dot) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let qrow = (b * l + i) * 3 * d + qo;
                        let krow = (b * l + j) * 3 * d + d + qo;
                        for c in 0..hd {
                            let kc = qkv[krow + c];
                            let qc = qkv[qrow + c];
                            dqkv[qrow + c] += ds * kc;
                            dqkv[krow + c] += ds * qc;
                        }
                    }
                }
            }
        }
        dqkv
    }

    fn block_forward(
        &self,
        ids: &BlockIds,
        x: &mut [F],
        key_ok: &[bool],
        nb: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> BlockCache<F> {
        let d = self.config.embed_dim;
        let ff = self.config.ff_dim;
        let rows = nb * self.config.seq_len();
        let (h1, ln1) = layer_norm(x, self.p(ids.ln1_g), self.p(ids.ln1_b), d);
        let qkv = linear(&h1, self.p(ids.w_qkv), self.p(ids.b_qkv), rows, d, 3 * d);
        let (att, probs) = self.attention(&qkv, key_ok, nb);
        let mut o = linear(&att, self.p(ids.w_o), self.p(ids.b_o), rows, d, d);
        let drop1 = self.dropout_mask(o.len(), rng.as_deref_mut());
        if let Some(m) = &drop1 {
            for (v, k) in o.iter_mut().zip(m) {
                *v *= *k;
            }
        }
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += *ov;
        }
        let (h2, ln2) = layer_norm(x, self.p(ids.ln2_g), self.p(ids.ln2_b), d);
        let u = linear(&h2, self.p(ids.w_ff1), self.p(ids.b_ff1), rows, d, ff);
        let g: Vec<F> = u.iter().map(|v| gelu(*v)).collect();
        let mut f = linear(&g, self.p(ids.w_ff2), self.p(ids.b_ff2), rows, ff, d);
        let drop2 = self.dropout_mask(f.len(), rng.as_deref_mut());
        if let Some(m) = &drop2 {
            for (v, k) in f.iter_mut().zip(m) {
                *v *= *k;
            }
        }
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += *fv;
        }
        BlockCache { ln1, h1, qkv, probs, att, drop1, ln2, h2, u, g, drop2 }
    }

    /// Takes the gradient w.r.t. the block output and returns it w.r.t. the input.
    fn block_backward(&self, ids: &BlockIds, c: &BlockCache<F>, dx: Vec<F>, key_ok: &[bool], nb: usize, grad: &mut [F]) -> Vec<F> {
        let d = self.config.embed_dim;
        let ff = self.config.ff_dim;
        let rows = nb * self.config.seq_len();
        let l = &self.layout;

        let mut df = dx.clone();
        if let Some(m) = &c.drop2 {
            for (v, k) in df.iter_mut().zip(m) {
                *v *= *k;
            }
        }
        let (dw, db) = pair_mut(grad, l.range(ids.w_ff2), l.range(ids.b_ff2));
        let mut dg = linear_backward(&c.g, self.p(ids.w_ff2), &df, rows, ff, d, dw, db);
        for (v, u) in dg.iter_mut().zip(&c.u) {
            *v *= gelu_grad(*u);
        }
        let (dw, db) = pair_mut(grad, l.range(ids.w_ff1), l.range(ids.b_ff1));
        let dh2 = linear_backward(&c.h2, self.p(ids.w_ff1), &dg, rows, d, ff, dw, db);
        let (dg2, db2) = pair_mut(grad, l.range(ids.ln2_g), l.range(ids.ln2_b));
        let dln2 = layer_norm_backward(&dh2, self.p(ids.ln2_g), &c.ln2, d, dg2, db2);
        let mut dx2 = dx;
        for (a, b) in dx2.iter_mut().zip(&dln2) {
            *a += *b;
        }

        let mut dout = dx2.clone();
        if let Some(m) = &c.drop1 {
            for (v, k) in dout.iter_mut().zip(m) {
                *v *= *k;
            }
        }
        let (dw, db) = pair_mut(grad, l.range(ids.w_o), l.range(ids.b_o));
        let datt = linear_backward(&c.att, self.p(ids.w_o), &dout, rows, d, d, dw, db);
        let dqkv = self.attention_backward(&c.qkv, &c.probs, &datt, key_ok, nb);
        let (dw, db) = pair_mut(grad, l.range(ids.w_qkv), l.range(ids.b_qkv));
        let dh1 = linear_backward(&c.h1, self.p(ids.w_qkv), &dqkv, rows, d, 3 * d, dw, db);
        let (dg1, db1) = pair_mut(grad, l.range(ids.ln1_g), l.range(ids.ln1_b));
        let dln1 = layer_norm_backward(&dh1, self.p(ids.ln1_g), &c.ln1, d, dg1, db1);
        for (a, b) in dx2.iter_mut().zip(&dln1) {
            *a += *b;
        }
        dx2
    }

    /// Rows of `z` belonging to modality `m` (0 return, 1 state, 2 action), `batch*K x d`.
    fn gather(&self, z: &[F], nb: usize, m: usize) -> Vec<F> {
        let (k, d) = (self.config.context_len, self.config.embed_dim);
        let mut out = Vec::with_capacity(nb * k * d);
        for b in 0..nb {
            for t in 0..k {
                let row = b * 3 * k + 3 * t + m;
                out.extend_from_slice(&z[row * d..(row + 1) * d]);
            }
        }
        out
    }

    fn scatter_add(&self, dz: &mut [F], src: &[F], nb: usize, m: usize) {
        let (k, d) = (self.config.context_len, self.config.embed_dim);
        for b in 0..nb {
            for t in 0..k {
                let row = b * 3 * k + 3 * t + m;
                let s = &src[(b * k + t) * d..(b * k + t + 1) * d];
                for (o, v) in dz[row * d..(row + 1) * d].iter_mut().zip(s) {
                    *o += *v;
                }
            }
        }
    }

    /// Forward pass keeping activations for [`Network::backward`]. Dropout
    /// is active only when `rng` is given.
    pub fn forward_train(
        &self,
        seqs: &[MaskedSequence],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(HeadOutput<F>, Cache<F>)> {
        let cfg = &self.config;
        let (k, d) = (cfg.context_len, cfg.embed_dim);
        let inp = self.encode(seqs)?;
        let nb = inp.nb;
        let mut x = self.embed_inputs(&inp);
        let mut enc = Vec::with_capacity(self.ids.enc.len());
        for ids in &self.ids.enc {
            enc.push(self.block_forward(ids, &mut x, &inp.key_ok, nb, rng.as_deref_mut()));
        }
        let (mut x, enc_ln) = layer_norm(&x, self.p(self.ids.enc_ln_g), self.p(self.ids.enc_ln_b), d);
        let mut dec = Vec::with_capacity(self.ids.dec.len());
        for ids in &self.ids.dec {
            dec.push(self.block_forward(ids, &mut x, &inp.key_ok, nb, rng.as_deref_mut()));
        }
        let (z, dec_ln) = layer_norm(&x, self.p(self.ids.dec_ln_g), self.p(self.ids.dec_ln_b), d);

        let ids = &self.ids;
        let rows = nb * k;
        let zr = self.gather(&z, nb, 0);
        let zs = self.gather(&z, nb, 1);
        let za = self.gather(&z, nb, 2);
        let ret = linear(&zr, self.p(ids.head_ret.w), self.p(ids.head_ret.b), rows, d, 1);
        let state = linear(&zs, self.p(ids.head_state.w), self.p(ids.head_state.b), rows, d, cfg.state_dim);
        let act = linear(&za, self.p(ids.head_act.w), self.p(ids.head_act.b), rows, d, cfg.action_out());

        let mut q = vec![F::zero(); rows];
        let mut q_acts = Vec::with_capacity(k);
        for t in 0..k {
            let mut h = Vec::with_capacity(nb * d);
            for b in 0..nb {
                h.extend_from_slice(&za[(b * k + t) * d..(b * k + t + 1) * d]);
            }
            let layers = &ids.q[t];
            let mut acts = Vec::with_capacity(layers.len());
            for (i, lay) in layers.iter().enumerate() {
                let mut y = linear(&h, self.p(lay.w), self.p(lay.b), nb, lay.d_in, lay.d_out);
                if i + 1 < layers.len() {
                    for v in y.iter_mut() {
                        if *v < F::zero() {
                            *v = F::zero();
                        }
                    }
                }
                acts.push(std::mem::replace(&mut h, y));
            }
            for b in 0..nb {
                q[b * k + t] = h[b];
            }
            q_acts.push(acts);
        }

        let out = HeadOutput { batch: nb, context_len: k, ret, state, act, q };
        check_finite(&out, &z, nb, 3 * k * d)?;
        let cache = Cache { inputs: inp, enc, enc_ln, dec, dec_ln, z, q_acts };
        Ok((out, cache))
    }

    /// Gradient of the loss w.r.t. every parameter, given gradients w.r.t. the head outputs.
    pub fn backward(&self, cache: &Cache<F>, dh: &HeadGrads<F>) -> Vec<F> {
        let cfg = &self.config;
        let (k, d) = (cfg.context_len, cfg.embed_dim);
        let l = 3 * k;
        let nb = cache.inputs.nb;
        let rows = nb * k;
        let ids = &self.ids;
        let lay = &self.layout;
        let mut grad = vec![F::zero(); lay.total];
        let mut dz = vec![F::zero(); cache.z.len()];

        let zr = self.gather(&cache.z, nb, 0);
        let zs = self.gather(&cache.z, nb, 1);
        let za = self.gather(&cache.z, nb, 2);
        let (dw, db) = pair_mut(&mut grad, lay.range(ids.head_ret.w), lay.range(ids.head_ret.b));
        let dzr = linear_backward(&zr, self.p(ids.head_ret.w), &dh.ret, rows, d, 1, dw, db);
        self.scatter_add(&mut dz, &dzr, nb, 0);
        let (dw, db) = pair_mut(&mut grad, lay.range(ids.head_state.w), lay.range(ids.head_state.b));
        let dzs = linear_backward(&zs, self.p(ids.head_state.w), &dh.state, rows, d, cfg.state_dim, dw, db);
        self.scatter_add(&mut dz, &dzs, nb, 1);
        let (dw, db) = pair_mut(&mut grad, lay.range(ids.head_act.w), lay.range(ids.head_act.b));
        let mut dza = linear_backward(&za, self.p(ids.head_act.w), &dh.act, rows, d, cfg.action_out(), dw, db);

        for t in 0..k {
            let layers = &ids.q[t];
            let acts = &cache.q_acts[t];
            let mut dy: Vec<F> = (0..nb).map(|b| dh.q[b * k + t]).collect();
            if dy.iter().all(|v| *v == F::zero()) {
                continue;
            }
            for i in (0..layers.len()).rev() {
                let ly = &layers[i];
                if i + 1 < layers.len() {
                    // input of layer i+1 is relu of this layer's output
                    for (g, a) in dy.iter_mut().zip(&acts[i + 1]) {
                        if *a <= F::zero() {
                            *g = F::zero();
                        }
                    }
                }
                let (dw, db) = pair_mut(&mut grad, lay.range(ly.w), lay.range(ly.b));
                dy = linear_backward(&acts[i], self.p(ly.w), &dy, nb, ly.d_in, ly.d_out, dw, db);
            }
            for b in 0..nb {
                let dst = &mut dza[(b * k + t) * d..(b * k + t + 1) * d];
                for (o, v) in dst.iter_mut().zip(&dy[b * d..(b + 1) * d]) {
                    *o += *v;
                }
            }
        }
        self.scatter_add(&mut dz, &dza, nb, 2);

        let (dg, db) = pair_mut(&mut grad, lay.range(ids.dec_ln_g), lay.range(ids.dec_ln_b));
        let mut dx = layer_norm_backward(&dz, self.p(ids.dec_ln_g), &cache.dec_ln, d, dg, db);
        for (bi, c) in ids.dec.iter().zip(&cache.dec).rev() {
            dx = self.block_backward(bi, c, dx, &cache.inputs.key_ok, nb, &mut grad);
        }
        let (dg, db) = pair_mut(&mut grad, lay.range(ids.enc_ln_g), lay.range(ids.enc_ln_b));
        dx = layer_norm_backward(&dx, self.p(ids.enc_ln_g), &cache.enc_ln, d, dg, db);
        for (bi, c) in ids.enc.iter().zip(&cache.enc).rev() {
            dx = self.block_backward(bi, c, dx, &cache.inputs.key_ok, nb, &mut grad);
        }

        // embedding
        let inp = &cache.inputs;
        let mut d_er = vec![F::zero(); rows * d];
        let mut d_es = vec![F::zero(); rows * d];
        let mut d_ea = vec![F::zero(); rows * d];
        {
            let pos_r = lay.range(ids.pos);
            let mask_r = lay.range(ids.mask_emb);
            let pad_r = lay.range(ids.pad_emb);
            for b in 0..nb {
                for s in 0..l {
                    let row = b * l + s;
                    let g = &dx[row * d..(row + 1) * d];
                    for j in 0..d {
                        grad[pos_r.start + s * d + j] += g[j];
                    }
                    match inp.kind[row] {
                        PAD => {
                            for j in 0..d {
                                grad[pad_r.start + j] += g[j];
                            }
                        }
                        MASKED => {
                            for j in 0..d {
                                grad[mask_r.start + j] += g[j];
                            }
                        }
                        _ => {
                            let r = (b * k + s / 3) * d;
                            let dst = match s % 3 {
                                0 => &mut d_er,
                                1 => &mut d_es,
                                _ => &mut d_ea,
                            };
                            dst[r..r + d].copy_from_slice(g);
                        }
                    }
                }
            }
        }
        for (de, x_in, dims, di) in [
            (&d_er, &inp.ret, 1, &ids.emb_ret),
            (&d_es, &inp.state, cfg.state_dim, &ids.emb_state),
            (&d_ea, &inp.act, cfg.action_dim, &ids.emb_act),
        ] {
            let (dw, db) = pair_mut(&mut grad, lay.range(di.w), lay.range(di.b));
            super::kernels::matmul_tn_acc(x_in, de, rows, dims, d, dw);
            for row in de.chunks_exact(d) {
                for (g, v) in db.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        }
        grad
    }

    /// Evaluation-mode forward pass returning normalized head outputs.
    pub fn forward_heads(&self, seqs: &[MaskedSequence]) -> Result<HeadOutput<F>> {
        Ok(self.forward_train(seqs, None)?.0)
    }

    /// Evaluation-mode forward pass in environment units.
    pub fn forward(&self, seqs: &[MaskedSequence]) -> Result<Vec<ModelOutput>> {
        let (h, cache) = self.forward_train(seqs, None)?;
        let cfg = &self.config;
        let (k, d) = (cfg.context_len, cfg.embed_dim);
        let l = 3 * k;
        let mut outs = Vec::with_capacity(seqs.len());
        for (b, seq) in seqs.iter().enumerate() {
            let latent = (0..l)
                .map(|s| {
                    let row = b * l + s;
                    cache.z[row * d..(row + 1) * d].iter().map(|v| v.as_f64()).collect()
                })
                .collect();
            outs.push(ModelOutput {
                latent,
                returns: (0..k).map(|t| h.return_raw(cfg, b, t)).collect(),
                states: (0..k).map(|t| h.state_raw(cfg, b, t)).collect(),
                actions: (0..k).map(|t| h.action_raw(cfg, b, t)).collect(),
                q: (0..k).map(|t| h.q_raw(cfg, b, t)).collect(),
                pad: seq.window.pad.clone(),
            });
        }
        Ok(outs)
    }
}

fn check_finite<F: Scalar>(h: &HeadOutput<F>, z: &[F], nb: usize, z_per_row: usize) -> Result<()> {
    let k = h.context_len;
    let sd = h.state.len() / (nb * k).max(1);
    let ad = h.act.len() / (nb * k).max(1);
    for b in 0..nb {
        let bad = z[b * z_per_row..(b + 1) * z_per_row].iter().any(|v| !v.is_finite())
            || h.ret[b * k..(b + 1) * k].iter().any(|v| !v.is_finite())
            || h.q[b * k..(b + 1) * k].iter().any(|v| !v.is_finite())
            || h.state[b * k * sd..(b + 1) * k * sd].iter().any(|v| !v.is_finite())
            || h.act[b * k * ad..(b + 1) * k * ad].iter().any(|v| !v.is_finite());
        if bad {
            return Err(Error::numeric(format!("non-finite activation in batch row {b}")));
        }
    }
    Ok(())
}

impl<F: Scalar> HeadOutput<F> {
    pub fn q_raw(&self, cfg: &ModelConfig, b: usize, t: usize) -> f64 {
        self.q[b * self.context_len + t].as_f64() * cfg.return_scale
    }

    pub fn return_raw(&self, cfg: &ModelConfig, b: usize, t: usize) -> f64 {
        self.ret[b * self.context_len + t].as_f64() * cfg.return_scale
    }

    pub fn state_raw(&self, cfg: &ModelConfig, b: usize, t: usize) -> Vec<f64> {
        let sd = cfg.state_dim;
        let r = (b * self.context_len + t) * sd;
        (0..sd)
            .map(|j| self.state[r + j].as_f64() * cfg.state_std[j] + cfg.state_mean[j])
            .collect()
    }

    /// Continuous action, or logits for discrete actions.
    pub fn action_raw(&self, cfg: &ModelConfig, b: usize, t: usize) -> Vec<f64> {
        let ad = cfg.action_out();
        let r = (b * self.context_len + t) * ad;
        self.act[r..r + ad].iter().map(|v| v.as_f64()).collect()
    }

    /// The action an agent would take from the head at `(b, t)`: the point
    /// prediction clamped to `[-1, 1]` for continuous actions, the argmax
    /// index (lowest on ties) for discrete ones.
    pub fn action_choice(&self, cfg: &ModelConfig, b: usize, t: usize) -> Vec<f64> {
        let raw = self.action_raw(cfg, b, t);
        match cfg.action_kind {
            ActionKind::Continuous => raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            ActionKind::Discrete => {
                let mut best = 0;
                for (i, v) in raw.iter().enumerate() {
                    if *v > raw[best] {
                        best = i;
                    }
                }
                vec![best as f64]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sequence::{slot, Modality};
    use crate::trajectory::SubTrajectory;
    use rand::SeedableRng;

    fn config(k: usize, kind: ActionKind) -> ModelConfig {
        let (state_dim, action_dim) = match kind {
            ActionKind::Continuous => (3, 2),
            ActionKind::Discrete => (3, 4),
        };
        ModelConfig {
            context_len: k,
            embed_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_dim: 12,
            dropout: 0.0,
            q_layers: 2,
            q_hidden: 5,
            state_dim,
            action_dim,
            action_kind: kind,
            return_scale: 7.0,
            state_mean: vec![0.1, -0.2, 0.3],
            state_std: vec![1.5, 0.5, 2.0],
        }
    }

    fn window(cfg: &ModelConfig, n_pad: usize, seed: u64) -> SubTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.context_len;
        let action = |rng: &mut ChaCha8Rng| match cfg.action_kind {
            ActionKind::Continuous => (0..cfg.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ActionKind::Discrete => vec![rng.random_range(0..cfg.action_dim) as f64],
        };
        SubTrajectory {
            returns: (0..k).map(|_| rng.random_range(-5.0..10.0)).collect(),
            states: (0..k)
                .map(|_| (0..cfg.state_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect(),
            actions: (0..k).map(|_| action(&mut rng)).collect(),
            rewards: (0..k).map(|_| rng.random_range(0.0..1.0)).collect(),
            pad: (0..k).map(|t| t < n_pad).collect(),
            start: 0,
            ends_episode: false,
        }
    }

    /// Trained-looking parameters: the zero-initialized Q output layer would
    /// hide most of the network from the q outputs.
    fn perturbed<F: Scalar>(cfg: ModelConfig, seed: u64) -> Network<F> {
        let mut net = Network::<F>::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for v in net.params.iter_mut() {
            *v += F::of(rng.random_range(-0.3..0.3));
        }
        net
    }

    #[test]
    fn shapes_hold_for_all_context_lengths_and_kinds() {
        for kind in [ActionKind::Continuous, ActionKind::Discrete] {
            for k in [1, 4, 8] {
                let cfg = config(k, kind);
                let net = Network::<f32>::new(cfg.clone(), 0).unwrap();
                let seqs: Vec<_> = (0..3)
                    .map(|i| MaskedSequence::unmasked(window(&cfg, i.min(k - 1), i as u64)))
                    .collect();
                let outs = net.forward(&seqs).unwrap();
                assert_eq!(outs.len(), 3);
                for o in &outs {
                    assert_eq!(o.latent.len(), 3 * k);
                    assert!(o.latent.iter().all(|r| r.len() == 8));
                    assert_eq!(o.returns.len(), k);
                    assert_eq!(o.states.len(), k);
                    assert!(o.states.iter().all(|s| s.len() == 3));
                    assert_eq!(o.actions.len(), k);
                    assert!(o.actions.iter().all(|a| a.len() == cfg.action_dim));
                    assert_eq!(o.q.len(), k);
                }
            }
        }
    }

    #[test]
    fn fresh_q_heads_are_small() {
        let cfg = config(4, ActionKind::Continuous);
        let net = Network::<f32>::new(cfg.clone(), 3).unwrap();
        let out = net.forward(&[MaskedSequence::unmasked(window(&cfg, 0, 1))]).unwrap();
        for t in 0..4 {
            assert!(out[0].q_value(t).unwrap().abs() < 0.1);
        }
    }

    #[test]
    fn q_value_rejects_padding() {
        let cfg = config(4, ActionKind::Continuous);
        let net = Network::<f32>::new(cfg.clone(), 3).unwrap();
        let out = net.forward(&[MaskedSequence::unmasked(window(&cfg, 2, 1))]).unwrap();
        assert!(out[0].q_value(1).is_err());
        assert!(out[0].q_value(2).is_ok());
        assert!(out[0].q_value(4).is_err());
    }

    #[test]
    fn masked_and_pad_values_are_unreadable() {
        for kind in [ActionKind::Continuous, ActionKind::Discrete] {
            let cfg = config(4, kind);
            let net = perturbed::<f32>(cfg.clone(), 5);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for trial in 0..20 {
                let w = window(&cfg, trial % 3, trial as u64);
                let mask: Vec<bool> = (0..12).map(|_| rng.random::<f64>() < 0.5).collect();
                let a = MaskedSequence::new(w.clone(), mask.clone()).unwrap();
                let mut w2 = w.clone();
                let other = window(&cfg, 0, 1000 + trial as u64);
                for t in 0..4 {
                    if w.pad[t] || mask[slot(t, Modality::Return)] {
                        w2.returns[t] = other.returns[t];
                    }
                    if w.pad[t] || mask[slot(t, Modality::State)] {
                        w2.states[t] = other.states[t].clone();
                    }
                    if w.pad[t] || mask[slot(t, Modality::Action)] {
                        w2.actions[t] = other.actions[t].clone();
                    }
                    w2.rewards[t] = other.rewards[t];
                }
                let b = MaskedSequence::new(w2, mask).unwrap();
                assert_eq!(net.forward(&[a]).unwrap(), net.forward(&[b]).unwrap());
            }
        }
    }

    #[test]
    fn full_mask_embedding_ignores_inputs() {
        let cfg = config(4, ActionKind::Continuous);
        let net = perturbed::<f64>(cfg.clone(), 2);
        let a = MaskedSequence::new(window(&cfg, 0, 1), vec![true; 12]).unwrap();
        let b = MaskedSequence::new(window(&cfg, 0, 2), vec![true; 12]).unwrap();
        let ea = net.embed(&[a]).unwrap();
        assert_eq!(ea, net.embed(&[b]).unwrap());
        let mask = net.param("embed.mask").unwrap();
        let pos = net.param("embed.position").unwrap();
        for s in 0..12 {
            for j in 0..8 {
                assert_eq!(ea[s * 8 + j], mask[j] + pos[s * 8 + j]);
            }
        }
    }

    #[test]
    fn identical_tokens_without_positions_embed_identically() {
        let cfg = config(2, ActionKind::Continuous);
        let mut net = perturbed::<f64>(cfg.clone(), 2);
        net.param_mut("embed.position").unwrap().fill(0.0);
        let mut w = window(&cfg, 0, 1);
        w.returns[1] = w.returns[0];
        w.states[1] = w.states[0].clone();
        w.actions[1] = w.actions[0].clone();
        let e = net.embed(&[MaskedSequence::unmasked(w)]).unwrap();
        assert_eq!(e[..24], e[24..]);
    }

    #[test]
    fn forward_is_pure_and_batch_rows_are_independent() {
        let cfg = config(4, ActionKind::Discrete);
        let net = perturbed::<f32>(cfg.clone(), 8);
        let seqs: Vec<_> = (0..6)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                let mask = (0..12).map(|_| rng.random::<f64>() < 0.4).collect();
                MaskedSequence::new(window(&cfg, (i % 4) as usize, i), mask).unwrap()
            })
            .collect();
        let batched = net.forward(&seqs).unwrap();
        assert_eq!(batched, net.forward(&seqs).unwrap());
        for (i, s) in seqs.iter().enumerate() {
            let single = net.forward(std::slice::from_ref(s)).unwrap();
            assert_eq!(single[0], batched[i]);
        }
        let same = vec![seqs[0].clone(), seqs[0].clone()];
        let out = net.forward(&same).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn bad_inputs_are_usage_errors() {
        let cfg = config(4, ActionKind::Discrete);
        let net = Network::<f32>::new(cfg.clone(), 0).unwrap();
        let mut w = window(&cfg, 0, 1);
        w.actions[2] = vec![9.0];
        assert_eq!(net.forward(&[MaskedSequence::unmasked(w)]).unwrap_err().exit_code(), 2);
        let short = window(&config(2, ActionKind::Discrete), 0, 1);
        assert!(net.forward(&[MaskedSequence::unmasked(short)]).is_err());
    }

    #[test]
    fn non_finite_activations_name_the_row() {
        let cfg = config(2, ActionKind::Continuous);
        let net = perturbed::<f32>(cfg.clone(), 1);
        let good = MaskedSequence::unmasked(window(&cfg, 0, 1));
        let mut w = window(&cfg, 0, 2);
        w.returns[1] = f64::INFINITY;
        let err = net.forward(&[good, MaskedSequence::unmasked(w)]).unwrap_err();
        assert!(err.to_string().contains("batch row 1"), "{err}");
        assert_eq!(err.exit_code(), 4);
    }

    fn layer_norm_ref(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .zip(g.iter().zip(b))
            .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
            .collect()
    }

    #[test]
    fn blockless_q_matches_hand_evaluation() {
        // No transformer blocks and a single linear Q layer: q is an affine
        // map of the twice layer-normalized action-slot embedding.
        let mut cfg = config(1, ActionKind::Continuous);
        cfg.encoder_layers = 0;
        cfg.decoder_layers = 0;
        cfg.q_layers = 1;
        cfg.embed_dim = 4;
        cfg.heads = 1;
        let net = perturbed::<f64>(cfg.clone(), 4);
        let w = window(&cfg, 0, 3);
        let out = net.forward(&[MaskedSequence::unmasked(w.clone())]).unwrap();

        let p = |n: &str| net.param(n).unwrap().to_vec();
        let (ew, eb, pos) = (p("embed.action.w"), p("embed.action.b"), p("embed.position"));
        let e: Vec<f64> = (0..4)
            .map(|j| w.actions[0][0] * ew[j] + w.actions[0][1] * ew[4 + j] + eb[j] + pos[2 * 4 + j])
            .collect();
        let h = layer_norm_ref(&e, &p("encoder.ln.g"), &p("encoder.ln.b"));
        let z = layer_norm_ref(&h, &p("decoder.ln.g"), &p("decoder.ln.b"));
        let (qw, qb) = (p("q.0.0.w"), p("q.0.0.b"));
        let q: f64 = (0..4).map(|j| z[j] * qw[j]).sum::<f64>() + qb[0];
        let got = out[0].q[0];
        assert!((got - q * cfg.return_scale).abs() < 1e-12, "{got} vs {}", q * cfg.return_scale);
    }

    #[test]
    fn window_content_anywhere_moves_q() {
        // bidirectional attention: a later token changes q at an earlier step
        let cfg = config(4, ActionKind::Continuous);
        let net = perturbed::<f64>(cfg.clone(), 6);
        let w = window(&cfg, 0, 4);
        let mut w2 = w.clone();
        w2.states[3][0] += 1.0;
        let a = net.forward(&[MaskedSequence::unmasked(w)]).unwrap();
        let b = net.forward(&[MaskedSequence::unmasked(w2)]).unwrap();
        assert_ne!(a[0].q[0], b[0].q[0]);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for kind in [ActionKind::Continuous, ActionKind::Discrete] {
            let cfg = config(3, kind);
            let mut net = perturbed::<f64>(cfg.clone(), 12);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let seqs: Vec<_> = (0..2)
                .map(|i| {
                    let mask = (0..9).map(|_| rng.random::<f64>() < 0.4).collect();
                    MaskedSequence::new(window(&cfg, i, 50 + i as u64), mask).unwrap()
                })
                .collect();
            // random linear functional of all head outputs
            let (h0, cache) = net.forward_train(&seqs, None).unwrap();
            let mut coef = HeadGrads::zeros_like(&h0);
            for v in coef.ret.iter_mut().chain(&mut coef.state).chain(&mut coef.act).chain(&mut coef.q) {
                *v = rng.random_range(-1.0..1.0);
            }
            let objective = |net: &Network<f64>| {
                let h = net.forward_heads(&seqs).unwrap();
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                dot(&h.ret, &coef.ret) + dot(&h.state, &coef.state) + dot(&h.act, &coef.act) + dot(&h.q, &coef.q)
            };
            let grad = net.backward(&cache, &coef);
            let eps = 1e-5;
            let mut worst = 0.0f64;
            for i in 0..net.params.len() {
                let orig = net.params[i];
                net.params[i] = orig + eps;
                let up = objective(&net);
                net.params[i] = orig - eps;
                let down = objective(&net);
                net.params[i] = orig;
                let num = (up - down) / (2.0 * eps);
                let rel = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{kind:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn dropout_changes_training_outputs_only_when_enabled() {
        let mut cfg = config(2, ActionKind::Continuous);
        cfg.dropout = 0.5;
        let net = perturbed::<f32>(cfg.clone(), 1);
        let seqs = [MaskedSequence::unmasked(window(&cfg, 0, 9))];
        let eval = net.forward_heads(&seqs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train, _) = net.forward_train(&seqs, Some(&mut rng)).unwrap();
        assert_ne!(eval, train);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (again, _) = net.forward_train(&seqs, Some(&mut rng)).unwrap();
        assert_eq!(train, again);
    }
}
