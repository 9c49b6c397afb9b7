use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::eval::EvaluationReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: Option<f64>,
    pub minority_auc: Option<f64>,
}

/// Summary metrics per model plus differences against the first report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub class_names: Vec<String>,
    /// Class with the smallest support in the first report (first on ties).
    pub minority_class: String,
    pub rows: Vec<ComparisonRow>,
    /// `rows[i] - rows[0]` metric by metric.
    pub deltas: Vec<ComparisonRow>,
}

pub const COMPARISON_METRICS: [&str; 4] = ["accuracy", "macro_f1", "macro_auc", "minority_auc"];

impl ComparisonRow {
    pub fn values(&self) -> [Option<f64>; 4] {
        [Some(self.accuracy), Some(self.macro_f1), self.macro_auc, self.minority_auc]
    }
}

pub fn compare_models(reports: &[EvaluationReport]) -> Result<Comparison, PipelineError> {
    let Some(first) = reports.first().filter(|_| reports.len() >= 2) else {
        return Err(PipelineError::Data(format!("comparison needs at least 2 reports, got {}", reports.len())));
    };
    for r in &reports[1..] {
        if r.class_names != first.class_names {
            return Err(PipelineError::Data(format!(
                "class sets differ: {} has {:?}, {} has {:?}",
                first.model, first.class_names, r.model, r.class_names
            )));
        }
    }
    let minority = first
        .metrics
        .per_class
        .iter()
        .enumerate()
        .min_by_key(|(i, c)| (c.support, *i))
        .map(|(_, c)| c.class.clone())
        .ok_or_else(|| PipelineError::Data("reports have no classes".into()))?;
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            accuracy: r.metrics.accuracy,
            macro_f1: r.metrics.macro_f1,
            macro_auc: r.macro_auc,
            minority_auc: r.auc_of(&minority),
        })
        .collect();
    let base = &rows[0];
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    let deltas = rows
        .iter()
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            accuracy: r.accuracy - base.accuracy,
            macro_f1: r.macro_f1 - base.macro_f1,
            macro_auc: diff(r.macro_auc, base.macro_auc),
            minority_auc: diff(r.minority_auc, base.minority_auc),
        })
        .collect();
    Ok(Comparison {
        class_names: first.class_names.clone(),
        minority_class: minority,
        rows,
        deltas,
    })
}

impl Comparison {
    /// One line per model: metrics then deltas; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend(COMPARISON_METRICS.iter().map(|m| m.to_string()));
        header.extend(COMPARISON_METRICS.iter().map(|m| format!("delta_{m}")));
        w.write_record(&header).expect("in-memory csv");
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (r, d) in self.rows.iter().zip(&self.deltas) {
            let mut rec = vec![r.model.clone()];
            rec.extend(r.values().into_iter().map(cell));
            rec.extend(d.values().into_iter().map(cell));
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
