use crate::error::{Error, Result};
use crate::trajectory::SubTrajectory;

/// Token order inside one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Return = 0,
    State = 1,
    Action = 2,
}

#[inline]
pub fn slot(t: usize, m: Modality) -> usize {
    3 * t + m as usize
}

/// A context window laid out as `3K` tokens `(R_0, s_0, a_0, ..., R_{K-1}, s_{K-1}, a_{K-1})`
/// with a per-token mask. Values at masked or padded tokens never reach the
/// network; they are kept only as loss targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub window: SubTrajectory,
    pub mask: Vec<bool>,
    /// Stop-gradient value of the step after each window slot, in network
    /// units. Without it, TD targets bootstrap from the same forward pass and
    /// the final slot gets a Q term only at episode end.
    pub bootstrap: Option<Vec<f64>>,
}

impl MaskedSequence {
    pub fn new(window: SubTrajectory, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != 3 * window.context_len() {
            return Err(Error::usage(format!(
                "mask has {} slots, window needs {}",
                mask.len(),
                3 * window.context_len()
            )));
        }
        Ok(Self { window, mask, bootstrap: None })
    }

    /// Everything visible except padding.
    pub fn unmasked(window: SubTrajectory) -> Self {
        let mask = vec![false; 3 * window.context_len()];
        Self { window, mask, bootstrap: None }
    }

    pub fn context_len(&self) -> usize {
        self.window.context_len()
    }

    #[inline]
    pub fn is_pad(&self, slot: usize) -> bool {
        self.window.pad[slot / 3]
    }

    #[inline]
    pub fn is_masked(&self, slot: usize) -> bool {
        self.mask[slot]
    }

    /// Per-slot padding flags (`3K` entries).
    pub fn pad_slots(&self) -> Vec<bool> {
        (0..self.mask.len()).map(|s| self.is_pad(s)).collect()
    }
}
