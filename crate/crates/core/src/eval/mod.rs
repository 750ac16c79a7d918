//! Accuracy and AUROC evaluation, drop ratios and sweeps.

mod metrics;
mod protocol;
mod sweep;

pub use metrics::{attribute_confusion, auroc, drop_ratio_at_beta, ConfusionMatrix, Counts, DropRatio, MetricRow, MetricSeries};
pub use protocol::{evaluate_attributes, evaluate_fsc, meta_train, score_episode, EvalConfig, FscAccuracy, MIN_EVAL_EPISODES};
pub use sweep::{CellKey, SweepAxis, SweepCell, SweepTable};
