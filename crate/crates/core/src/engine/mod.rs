//! Training, scheduling, cross-validation, checkpoints and saliency.

pub mod checkpoint;
pub mod cv;
pub mod optim;
pub mod saliency;
pub mod train;

pub use cv::{ablation_sweep, cross_validate, CvReport, CvRun, FoldReport, Report};
pub use optim::{Adam, AdamConfig, ReduceOnPlateau};
pub use saliency::{saliency, SaliencyMaps};
pub use train::{evaluate, train_fold, EpochRecord, History, TrainConfig, TrainedModel, HISTORY_HEADER};
