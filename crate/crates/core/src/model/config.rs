use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{ActionKind, Dataset, ModalityDims};

/// Architecture and input normalization of the sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Context length K (timesteps per window).
    pub context_len: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Hidden width of the transformer feed-forward blocks.
    pub ff_dim: usize,
    pub dropout: f64,
    /// Linear layers per Q head (the last one maps to a scalar).
    pub q_layers: usize,
    pub q_hidden: usize,
    pub state_dim: usize,
    /// Action components (continuous) or action count (discrete).
    pub action_dim: usize,
    pub action_kind: ActionKind,
    /// Returns, rewards and Q values are divided by this inside the network.
    pub return_scale: f64,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_len: 4,
            embed_dim: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 4,
            ff_dim: 256,
            dropout: 0.1,
            q_layers: 2,
            q_hidden: 64,
            state_dim: 1,
            action_dim: 1,
            action_kind: ActionKind::Continuous,
            return_scale: 1.0,
            state_mean: vec![0.0],
            state_std: vec![1.0],
        }
    }
}

impl ModelConfig {
    /// Copies the modality shapes of `ds` and fits normalization statistics.
    pub fn fit_to(mut self, ds: &Dataset) -> Self {
        self.set_dims(ds.dims);
        let steps = ds.total_steps().max(1) as f64;
        let sd = ds.dims.state_dim;
        let mut mean = vec![0.0; sd];
        let mut sq = vec![0.0; sd];
        let mut max_abs_return = 0.0f64;
        for traj in &ds.trajectories {
            for s in &traj.states {
                for j in 0..sd {
                    mean[j] += s[j];
                    sq[j] += s[j] * s[j];
                }
            }
            for r in &traj.returns {
                max_abs_return = max_abs_return.max(r.abs());
            }
        }
        let mut std = vec![1.0; sd];
        for j in 0..sd {
            mean[j] /= steps;
            let var = (sq[j] / steps - mean[j] * mean[j]).max(0.0);
            std[j] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        }
        self.state_mean = mean;
        self.state_std = std;
        self.return_scale = if max_abs_return > 1e-6 { max_abs_return } else { 1.0 };
        self
    }

    pub fn set_dims(&mut self, dims: ModalityDims) {
        self.state_dim = dims.state_dim;
        self.action_dim = dims.action_dim;
        self.action_kind = dims.action_kind;
        if self.state_mean.len() != dims.state_dim {
            self.state_mean = vec![0.0; dims.state_dim];
            self.state_std = vec![1.0; dims.state_dim];
        }
    }

    pub fn dims(&self) -> ModalityDims {
        ModalityDims {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            action_kind: self.action_kind,
        }
    }

    pub fn seq_len(&self) -> usize {
        3 * self.context_len
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Width of the action head output (components or logits).
    pub fn action_out(&self) -> usize {
        self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(format!("invalid model config: {m}")));
        if self.context_len == 0 {
            return bad("context_len must be >= 1".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.ff_dim == 0 || self.q_layers == 0 || (self.q_layers > 1 && self.q_hidden == 0) {
            return bad("ff_dim, q_layers and q_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.state_dim == 0 || self.action_dim == 0 {
            return bad("state_dim and action_dim must be positive".into());
        }
        if self.state_mean.len() != self.state_dim || self.state_std.len() != self.state_dim {
            return bad("state normalization length differs from state_dim".into());
        }
        if !(self.return_scale > 0.0) || self.state_std.iter().any(|s| !(*s > 0.0)) {
            return bad("normalization scales must be positive".into());
        }
        Ok(())
    }
}
