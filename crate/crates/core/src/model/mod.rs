//! Masked bidirectional sequence model with per-timestep Q heads.

pub mod checkpoint;
pub mod config;
pub mod kernels;
pub mod network;
pub mod params;
pub mod scalar;
pub mod sequence;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use config::ModelConfig;
pub use network::{Cache, HeadGrads, HeadOutput, ModelOutput, Network};
pub use params::{DecayGroup, Layout};
pub use scalar::Scalar;
pub use sequence::{slot, MaskedSequence, Modality};
