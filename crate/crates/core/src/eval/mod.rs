//! Metrics and result tables.

mod metrics;
mod report;

pub use metrics::{
    accuracy, auc_binary, auc_multiclass, average_precision, confusion_matrix, f1_binary, MulticlassAuc, Scored,
    ScoredSet,
};
pub use report::{parse_report_csv, render_report, Report, ReportLayout, ResultRow, CSV_HEADER};
