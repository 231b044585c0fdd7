//! Suppression, average precision and false-positive diagnosis.

mod ap;
mod diagnose;
mod nms;
mod report;

pub use ap::{
    ap_at, average_precision, coco_ap, coco_thresholds, ApResult, GtIndex, Interpolation,
};
pub use diagnose::{classify, diagnose, ErrorBreakdown, ErrorKind, SimilarityMap};
pub use nms::{nms, nms_grouped};
pub use report::{
    emit_report, metric_rows, read_breakdowns, read_metrics_csv, write_metrics_csv, ExperimentEval,
    MetricRow,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Similarity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
