use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::calibration::CalibrationModel;
use super::confusion::{argmax, classification_metrics, confusion_matrix, ClassificationMetrics, ConfusionMatrix};
use super::roc::roc_auc_ovr;
use super::threshold::ThresholdPolicy;
use super::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub method: String,
    pub fitted_on: String,
    pub ece_before: Option<f64>,
    pub ece_after: Option<f64>,
}

impl CalibrationSummary {
    pub fn from_models(models: &[CalibrationModel], ece_before: Option<f64>, ece_after: Option<f64>) -> Option<Self> {
        let first = models.first()?;
        Some(CalibrationSummary {
            method: first.method().to_string(),
            fitted_on: first.fitted_on.as_str().to_string(),
            ece_before,
            ece_after,
        })
    }
}

/// A reported summary value that disagrees with what the counts imply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyFlag {
    pub metric: String,
    pub reported: f64,
    pub derived: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassificationMetrics,
    /// `None` where a class is missing from the labels.
    pub per_class_auc: BTreeMap<String, Option<f64>>,
    pub macro_auc: Option<f64>,
    pub calibration: Option<CalibrationSummary>,
    pub threshold: Option<ThresholdPolicy>,
    pub flags: Vec<DiscrepancyFlag>,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    /// Report from a confusion matrix alone; AUC fields stay empty.
    pub fn from_confusion(model: &str, confusion: ConfusionMatrix) -> Self {
        let metrics = classification_metrics(&confusion);
        EvaluationReport {
            model: model.to_string(),
            class_names: confusion.class_names.clone(),
            per_class_auc: confusion.class_names.iter().map(|c| (c.clone(), None)).collect(),
            confusion,
            metrics,
            macro_auc: None,
            calibration: None,
            threshold: None,
            flags: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Full report from per-sample class probabilities; predictions are argmax.
    pub fn from_probabilities(
        model: &str,
        probs: &[Vec<f64>],
        labels: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self, EvalError> {
        let k = class_names.len();
        let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
        let cm = confusion_matrix(labels, &preds, class_names.clone())?;
        let roc = roc_auc_ovr(probs, labels, k)?;
        let mut report = EvaluationReport::from_confusion(model, cm);
        for (name, curve) in class_names.iter().zip(&roc.per_class) {
            report.per_class_auc.insert(name.clone(), curve.as_ref().map(|c| c.auc));
        }
        report.macro_auc = roc.macro_auc;
        report.warnings = roc.warnings;
        Ok(report)
    }

    pub fn auc_of(&self, class: &str) -> Option<f64> {
        self.per_class_auc.get(class).copied().flatten()
    }

    /// Records a flag when `reported` and the counts-derived value differ by
    /// more than `tolerance`. Returns whether a flag was added.
    pub fn flag_reported_discrepancy(&mut self, metric: &str, reported: f64, tolerance: f64) -> bool {
        let derived = match metric {
            "accuracy" => self.metrics.accuracy,
            "macro_f1" => self.metrics.macro_f1,
            "macro_precision" => self.metrics.macro_precision,
            "macro_recall" => self.metrics.macro_recall,
            "macro_auc" => match self.macro_auc {
                Some(v) => v,
                None => return false,
            },
            _ => return false,
        };
        if (derived - reported).abs() <= tolerance {
            return false;
        }
        self.flags.push(DiscrepancyFlag {
            metric: metric.to_string(),
            reported,
            derived,
            note: format!(
                "reported {metric} {reported} is inconsistent with {derived:.4} implied by the confusion counts; \
                 the counts-derived value is kept"
            ),
        });
        true
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
