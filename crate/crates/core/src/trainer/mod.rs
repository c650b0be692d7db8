//! Two-view augmentation, schedules, the optimizer and the training loops.

pub mod augment;
pub mod config;
pub mod optim;
pub mod pretrain;
pub mod schedule;
pub mod supervised;

pub use augment::{eval_view, make_views, AugmentConfig};
pub use config::{DataConfig, DataSource, TrainConfig};
pub use optim::AdamW;
pub use pretrain::{pretrain, read_metric_log, EpochHook, MetricRecord, PretrainOutcome, Pretrainer, StepMetrics};
pub use schedule::{cosine_schedule, warmup_cosine};
pub use supervised::{
    argmax_rows, eval_batch, predict, train_supervised, SupervisedConfig, SupervisedOutcome, SupervisedStep,
    SupervisedTrainer,
};
