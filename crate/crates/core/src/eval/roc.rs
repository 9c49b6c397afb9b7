use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores strictly above the threshold are called positive.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        s
    }
}

/// Binary ROC curve. Thresholds are `+inf`, the midpoints between adjacent
/// distinct scores, and `-inf`; tied scores move together, so the trapezoid
/// area equals the Mann-Whitney statistic with half credit for ties. Returns
/// `None` when either class is absent.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<Option<RocCurve>, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::NonFinite(format!("score {i} is NaN")));
    }
    let p = positive.iter().filter(|&&b| b).count() as u64;
    let n = positive.len() as u64 - p;
    if p == 0 || n == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    // twice the area, in units of one positive-negative pair
    let mut area2: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gtp, mut gfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                gtp += 1;
            } else {
                gfp += 1;
            }
            i += 1;
        }
        area2 += gfp * (2 * tp + gtp);
        tp += gtp;
        fp += gfp;
        let threshold = if i < order.len() {
            let next = scores[order[i]];
            s / 2.0 + next / 2.0
        } else {
            f64::NEG_INFINITY
        };
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold,
        });
    }
    let auc = area2 as f64 / (2 * p * n) as f64;
    Ok(Some(RocCurve { points, auc }))
}

pub fn auc(scores: &[f64], positive: &[bool]) -> Result<Option<f64>, EvalError> {
    Ok(roc_curve(scores, positive)?.map(|c| c.auc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvrRoc {
    /// `None` for classes absent from the labels.
    pub per_class: Vec<Option<RocCurve>>,
    /// Mean over classes with a defined AUC.
    pub macro_auc: Option<f64>,
    pub warnings: Vec<String>,
}

/// One-vs-rest ROC for each class column of a row-per-sample score matrix.
pub fn roc_auc_ovr(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<OvrRoc, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} score rows vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(r) = scores.iter().position(|r| r.len() != classes) {
        return Err(EvalError::LengthMismatch(format!("score row {r} does not have {classes} columns")));
    }
    if let Some(index) = labels.iter().position(|&l| l >= classes) {
        return Err(EvalError::LabelOutOfRange {
            index,
            label: labels[index],
            classes,
        });
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut warnings = Vec::new();
    for k in 0..classes {
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let curve = roc_curve(&col, &pos)?;
        if curve.is_none() {
            let msg = format!("class {k} has no positive or no negative samples; AUC undefined and excluded from macro");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        per_class.push(curve);
    }
    let defined: Vec<f64> = per_class.iter().flatten().map(|c| c.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(OvrRoc {
        per_class,
        macro_auc,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_gives_one() {
        let a = auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(a, Some(1.0));
    }

    #[test]
    fn all_ties_give_half() {
        let a = auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(a, Some(0.5));
    }

    #[test]
    fn hand_case_matches_pair_count() {
        // positives 0.8, 0.4, 0.4 ; negatives 0.4, 0.1, 0.7
        let s = [0.8, 0.4, 0.4, 0.4, 0.1, 0.7];
        let y = [true, true, true, false, false, false];
        // pairs: 0.8 beats all 3; each 0.4 beats 0.1, ties 0.4, loses 0.7 -> 1.5 each
        let expect = (3.0 + 1.5 + 1.5) / 9.0;
        assert_eq!(auc(&s, &y).unwrap(), Some(expect));
    }

    #[test]
    fn curve_runs_from_origin_to_corner() {
        let c = roc_curve(&[0.1, 0.5, 0.5, 0.9], &[false, true, false, true]).unwrap().unwrap();
        assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
        let last = c.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(c.points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        assert!((c.points[1].threshold - 0.7).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded_from_macro() {
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
        let r = roc_auc_ovr(&scores, &[0, 1, 0], 3).unwrap();
        assert!(r.per_class[2].is_none());
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.macro_auc, Some(1.0));
    }
}
