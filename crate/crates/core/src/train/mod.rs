//! Data pipeline, schedule, checkpointing and the optimisation loop.

mod config;
mod data;
mod manifest;
mod trainer;

pub use config::{lr_at, TrainConfig};
pub use data::{sample_batch, CropSite, Dataset, TrainBatch};
pub use manifest::{Manifest, TrainEvent, CODE_VERSION, MANIFEST_FILE};
pub use trainer::{
    resume, train, train_step, EvalRecord, StepStats, TrainOutcome, Trainer, META_INTERVAL, META_ITER, META_MANIFEST,
};
