//! Region IoU, correlation statistics, and run reports.

mod iou;
mod report;
mod stats;

pub use iou::region_iou;
pub use report::{
    emit_report, evaluate, fmt_sig9, BucketSummary, CostSummary, EvalReport, FailureSummary,
    ImprovementSummary, RegionRecord, RunRecords, FAILURE_THRESHOLD,
};
pub use stats::{
    correlate, ln_gamma, p_value, pearson, regularized_incomplete_beta, student_t_two_sided,
    CorrelationResult,
};
