//! Metrics and the experiment drivers.

pub mod experiment;
pub mod metrics;

pub use experiment::{
    evaluate_split, make_split, render_table, run_experiment, run_kfold, ExperimentConfig, ExperimentReport, FoldReport,
    KFoldConfig, KFoldReport, SplitSizes, TableRow,
};
pub use metrics::{compute_metrics, Averages, ClassMetrics, ConfusionMatrix, MetricsReport};
