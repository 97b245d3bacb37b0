//! Alternating discriminator/generator optimization with configuration,
//! seeded data order, checkpointing and CSV logs.

mod config;
mod data;
mod run;
mod state;
mod step;

pub use config::{Ablation, ModelSection, StepConfig, TrainConfig, TrainSection};
pub use data::{batches_per_epoch, epoch_order, for_each_batch, Sample, TrainingSet};
pub use run::{
    epoch_checkpoint, step_checkpoint, train_loop, write_logs, TrainOutcome, CHECKPOINT_FILE,
    HISTORY_FILE, HISTORY_HEADER, STEPS_FILE,
};
pub use state::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, EpochRecord, RunningStats, StepLog,
    TrainState,
};
pub use step::train_step;
