//! Patch training with Adam, the dual-signal learning-rate schedule,
//! k-fold splitting and cross-validation.

mod cv;
mod folds;
mod schedule;
mod trainer;

pub use cv::{cross_validate, evaluate_checkpoint, write_dsc_table, CvReport, FoldResult};
pub use folds::{make_folds, FoldSpec};
pub use schedule::{lr_schedule_step, ScheduleConfig, StepEvents, TrainState};
pub use trainer::{train_fold, validation_loss, PreparedCase, TrainConfig, TrainReport, Trainer};
