//! Configuration, optimisation, training, evaluation and their file formats.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, Progress};
pub use config::{HyperParams, OptimizerConfig};
pub use eval::{evaluate, read_scores, write_evaluation, EvalReport, Evaluation, MetricMatrix, ScoreRow};
pub use metrics::{auc, calibrate_threshold, mcc, metrics, Confusion, MetricsReport};
pub use optim::Adam;
pub use train::{train, StepRecord, TrainOptions, TrainSummary, CHECKPOINT_FILE, LOSS_LOG_FILE};
