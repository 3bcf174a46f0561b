//! Optimizer, training loop, metrics and k-fold evaluation.

pub mod adam;
pub mod eval;
pub mod metrics;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use eval::{evaluate_scores, fold_partition, kfold_eval, score_fold, EvalReport, FoldResult, MetricSummary};
pub use metrics::{auc, confusion, mean_std, metrics, roc_auc, roc_curve, Confusion, Metric, Metrics, RocPoint};
pub use trainer::{accuracy, train, train_on_dataset, train_with, EpochRecord, TrainConfig, TrainOutcome};
