//! Loss, optimizer, learning-rate schedule, training loop and checkpoints.

mod checkpoint;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use loss::{psnr_loss, PSNR_LOSS_EPS};
pub use optim::{adamw_step, cosine_lr, AdamW, OptState, Schedule};
pub use trainer::{batch_indices, derive_seed, evaluate, train_loop, train_step, train_until, TraceRow, TrainConfig};
