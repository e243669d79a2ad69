//! Ranking metrics, comparison reports and the stage-subset study.

mod metrics;
mod report;
mod subset;

pub use metrics::{
    auc, average_ranks, mean_ndcg, ndcg_at_k, pearson, relaimpr_auc, relaimpr_ndcg, spearman, NdcgSummary,
    ScoredGroup,
};
pub use report::{read_reports_csv, render_comparison, user_groups, write_reports_csv, MetricReport, ReportMeta, TaskMetrics};
pub use subset::{stage_subset_eval, StageSubsetReport, StageSubsetRow};
