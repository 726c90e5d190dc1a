//! The 2-D transport benchmark: toy datasets, W2² / NPE / straightness metrics and
//! the multi-trial runner.

mod datasets;
mod metrics;
mod runner;

pub use datasets::{sample_dataset, Dataset, TaskSpec};
pub use metrics::{
    eval_npe, eval_sources, eval_targets, eval_trajectory, eval_w2, evaluate, metrics_from_trajectory, npe_from,
    reference_w2, straightness_score, EvalMetrics, DEFAULT_N_TEST, EVAL_STEPS, REFERENCE_N,
};
pub use runner::{
    mean_std, run_benchmark, BenchConfig, BenchmarkReport, Phase, Progress, ReferenceW2, ReportRow, TrialResult,
};
