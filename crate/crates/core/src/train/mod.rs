//! Adam, the plateau learning-rate schedule, checkpoints and the epoch loop.

mod adam;
mod checkpoint;
mod config;
mod scheduler;
mod trainer;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{RunConfig, TrainConfig};
pub use scheduler::{
    SchedulerEvent, SchedulerState, DECAY_FACTOR, DEFAULT_LEARNING_RATE, PATIENCE_DECAY,
    PATIENCE_STOP,
};
pub use trainer::{
    batch_gradients, clip_global_norm, evaluate_model, sample_of, EpochRecord, StopReason,
    TrainReport, Trainer, BEST_CHECKPOINT, HISTORY_FILE, HISTORY_HEADER, LAST_CHECKPOINT,
};
