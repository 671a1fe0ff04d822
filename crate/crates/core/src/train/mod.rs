//! Mask schedule, losses, optimizer and the training loop.

pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod optim;
pub mod trainer;

pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{batch_loss, expectile_loss, expectile_weight, q_loss_window, recon_losses, LossBreakdown};
pub use mask::{make_mask, MaskMode, MaskSchedule, DEFAULT_MASK_RATIOS};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{bootstrap_values, eval_loss, mask_batch, train_model, train_step, MetricsRecord, TrainConfig, Trainer};
