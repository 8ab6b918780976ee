//! Optimization of segmentation models with the combined CE + Dice loss.

pub mod loss;
mod optim;
mod trainer;

pub use optim::{lr_at, LrSchedule, Sgd};
pub use trainer::{
    train, train_step, validate, BestState, Segmenter, StepRecord, TrainConfig, TrainOutcome, TrainingLog,
    ValRecord,
};
