use serde::{Deserialize, Serialize};

use super::EvalError;

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(EvalError::LengthMismatch(format!(
                "confusion counts must be {k}x{k} for {k} class names"
            )));
        }
        Ok(ConfusionMatrix { class_names, counts })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Relabels classes: new class `perm[i]` is old class `i`.
    pub fn permuted(&self, perm: &[usize]) -> ConfusionMatrix {
        let k = self.classes();
        let mut out = ConfusionMatrix::zeros(vec![String::new(); k]);
        for i in 0..k {
            out.class_names[perm[i]] = self.class_names[i].clone();
            for j in 0..k {
                out.counts[perm[i]][perm[j]] = self.counts[i][j];
            }
        }
        out
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for n in &self.class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(n);
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    class_names: Vec<String>,
) -> Result<ConfusionMatrix, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let k = class_names.len();
    let mut cm = ConfusionMatrix::zeros(class_names);
    for (index, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        for label in [t, p] {
            if label >= k {
                return Err(EvalError::LabelOutOfRange { index, label, classes: k });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 with unweighted macro means. An empty
/// predicted column has precision 0; an empty true row has recall 0.
pub fn classification_metrics(cm: &ConfusionMatrix) -> ClassificationMetrics {
    let k = cm.classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|i| {
            let tp = cm.counts[i][i];
            let precision = ratio(tp, cm.col_sum(i));
            let recall = ratio(tp, cm.row_sum(i));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class: cm.class_names[i].clone(),
                precision,
                recall,
                f1,
                support: cm.row_sum(i),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / k as f64
        }
    };
    ClassificationMetrics {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: ratio(cm.trace(), cm.total()),
        per_class,
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Macro-F1 of argmax decisions over `k` classes.
pub fn macro_f1_from_labels(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<f64, EvalError> {
    let names = (0..k).map(|i| i.to_string()).collect();
    Ok(classification_metrics(&confusion_matrix(y_true, y_pred, names)?).macro_f1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = [0, 1, 2, 2, 1];
        let cm = confusion_matrix(&y, &y, names(3)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
    }

    #[test]
    fn empty_input_gives_zero_matrix() {
        let cm = confusion_matrix(&[], &[], names(3)).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(classification_metrics(&cm).accuracy, 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(matches!(
            confusion_matrix(&[0, 3], &[0, 0], names(3)),
            Err(EvalError::LabelOutOfRange { index: 1, label: 3, .. })
        ));
    }

    #[test]
    fn identity_two_class_metrics_are_one() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![vec![50, 0], vec![0, 50]]).unwrap();
        let m = classification_metrics(&cm);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert!(m.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0));
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![vec![5, 0], vec![3, 0]]).unwrap();
        let m = classification_metrics(&cm);
        assert_eq!(m.per_class[1].precision, 0.0);
        assert_eq!(m.per_class[1].f1, 0.0);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
