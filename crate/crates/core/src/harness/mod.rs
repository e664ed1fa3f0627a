//! Configuration, persistence, training and the ablation runner.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod prepare;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{image_latent_shape, RunConfig, SamplerSettings, Task, SEED_ENV};
pub use prepare::{Encoders, TrainingRecord};
pub use train::{checkpoint_name, LossLog, RunOutput, StepLog, Trainer, LAST_GOOD, LATEST, LOG_HEADER};
pub use ablation::{run_ablation, run_arm, AblationRow, AblationTable, Arm, ArmResult, EvalSet, Score};
