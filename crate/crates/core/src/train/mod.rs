//! Pre-training and fine-tuning loops with embedding-space adversarial
//! training.
//!
//! Determinism holds for a single training thread: batch composition, MLM
//! corruption, adversarial initialization and dropout masks are all drawn
//! from ChaCha streams keyed on the seed and the step or draw number.

mod adversarial;
mod config;
mod optim;
mod trainer;

pub use adversarial::{kl_consistency, perturb_embeddings};
pub use config::{AdvConfig, ModalitySchedule, RunConfig, Stage, TrainConfig};
pub use optim::{global_grad_norm, learning_rate, AdamW};
pub use trainer::{
    rows_for_step, run_training, train_step, trainable_samples, BatchPlanner, CheckpointSink,
    DirectorySink, MemorySink, NoCheckpoints, StepMetrics, TrainingOutcome, TrainingSession,
};
