//! Ranking metrics and run comparison.

mod metrics;
mod report;

pub use metrics::{average_precision_at_k, hit_at_k, ndcg_at_k, positives, reciprocal_rank, Grades};
pub use report::{
    compare_runs, evaluate, Comparison, EvalSettings, MetricDelta, MetricReport, QueryMetrics, RelevanceJudgments, Run,
};
