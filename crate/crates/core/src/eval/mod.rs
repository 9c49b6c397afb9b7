//! Confusion matrices, classification metrics, one-vs-rest ROC, calibration,
//! operating thresholds and evaluation reports.

pub mod calibration;
pub mod confusion;
pub mod reference;
pub mod report;
pub mod roc;
pub mod threshold;

pub use calibration::{
    ece, isotonic_fit, platt_fit, reliability_bins, reliability_csv, CalibrationMethod, CalibrationModel, Calibrator,
    OvrCalibrator, ReliabilityBin, PLATT_SLOPE_CAP,
};
pub use confusion::{
    argmax, classification_metrics, confusion_matrix, macro_f1_from_labels, ClassMetrics, ClassificationMetrics,
    ConfusionMatrix,
};
pub use report::{CalibrationSummary, DiscrepancyFlag, EvaluationReport};
pub use roc::{auc, roc_auc_ovr, roc_curve, OvrRoc, RocCurve, RocPoint};
pub use threshold::{precision_target_threshold, youden_threshold, ThresholdKind, ThresholdPolicy};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("label {label} at index {index} outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("both classes must be present")]
    SingleClass,
    #[error("input is empty or too short")]
    Empty,
    #[error("class sets differ: {0}")]
    ClassSetMismatch(String),
    #[error("split provenance: {0}")]
    Provenance(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
