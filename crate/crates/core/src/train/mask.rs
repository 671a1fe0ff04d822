//! Mask patterns over the `3K` token grid.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MASK_RATIOS: [f64; 7] = [0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Uniformly chosen subset of the non-pad tokens.
    Random,
    /// Contiguous suffix ending at the final action token.
    Autoregressive,
}

/// Number of tokens to hide among `n` non-pad tokens.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Mask over `3K` tokens for a window with per-timestep padding `pad`.
/// Pad tokens are never marked as masked.
pub fn make_mask<R: Rng + ?Sized>(pad: &[bool], ratio: f64, mode: MaskMode, rng: &mut R) -> Vec<bool> {
    let n_slots = 3 * pad.len();
    let real: Vec<usize> = (0..n_slots).filter(|s| !pad[s / 3]).collect();
    let n_mask = masked_count(real.len(), ratio);
    let mut mask = vec![false; n_slots];
    match mode {
        MaskMode::Random => {
            for i in sample(rng, real.len(), n_mask) {
                mask[real[i]] = true;
            }
        }
        MaskMode::Autoregressive => {
            // padding is on the left, so real tokens form a suffix already
            for &s in &real[real.len() - n_mask..] {
                mask[s] = true;
            }
        }
    }
    mask
}

/// Per-batch draw of a mask ratio and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub ratios: Vec<f64>,
    pub modes: Vec<MaskMode>,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_MASK_RATIOS.to_vec(),
            modes: vec![MaskMode::Random, MaskMode::Autoregressive],
        }
    }
}

impl MaskSchedule {
    /// Schedule with random masking removed.
    pub fn autoregressive_only() -> Self {
        Self::default().without_random()
    }

    /// Same ratios, autoregressive mode only.
    pub fn without_random(&self) -> Self {
        Self {
            ratios: self.ratios.clone(),
            modes: vec![MaskMode::Autoregressive],
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, MaskMode) {
        let ratio = self.ratios[rng.random_range(0..self.ratios.len())];
        let mode = self.modes[rng.random_range(0..self.modes.len())];
        (ratio, mode)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.ratios.is_empty() || self.modes.is_empty() {
            return Err(crate::Error::usage("mask schedule needs at least one ratio and one mode"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(crate::Error::usage(format!("mask ratio {r} outside (0, 1]")));
        }
        Ok(())
    }
}
