//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::{DecayGroup, Layout, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay for transformer and reconstruction-head matrices.
    pub weight_decay: f64,
    /// Decay for Q-head matrices.
    pub q_weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.005,
            q_weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    m: Vec<F>,
    v: Vec<F>,
    /// Per-parameter decay coefficient.
    decay: Vec<F>,
    t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, layout: &Layout) -> Self {
        let mut decay = vec![F::zero(); layout.total];
        for info in &layout.infos {
            let wd = match info.decay {
                DecayGroup::None => 0.0,
                DecayGroup::Transformer => config.weight_decay,
                DecayGroup::QHead => config.q_weight_decay,
            };
            decay[info.offset..info.offset + info.len].fill(F::of(wd));
        }
        Self {
            config,
            m: vec![F::zero(); layout.total],
            v: vec![F::zero(); layout.total],
            decay,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F], lr: f64) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let bc1 = F::of(1.0 / (1.0 - c.beta1.powi(self.t.min(i32::MAX as u64) as i32)));
        let bc2 = F::of(1.0 / (1.0 - c.beta2.powi(self.t.min(i32::MAX as u64) as i32)));
        let lr_f = F::of(lr);
        let eps = F::of(c.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + one_b1 * g;
            self.v[i] = b2 * self.v[i] + one_b2 * g * g;
            let mh = self.m[i] * bc1;
            let vh = self.v[i] * bc2;
            if lr != 0.0 {
                let p = params[i];
                params[i] = p - lr_f * (self.decay[i] * p + mh / (vh.sqrt() + eps));
            }
        }
    }
}
