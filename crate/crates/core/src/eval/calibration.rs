use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::sigmoid;
use crate::split::Split;

/// Largest slope magnitude a Platt fit may reach; separable data would
/// otherwise push it to infinity.
pub const PLATT_SLOPE_CAP: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrator {
    /// `p = sigmoid(slope * score + intercept)`
    Platt { slope: f64, intercept: f64 },
    /// Nondecreasing step function: `values[i]` holds from `breakpoints[i]`
    /// up to the next breakpoint; constant beyond both ends.
    Isotonic { breakpoints: Vec<f64>, values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub calibrator: Calibrator,
    /// Split the model was fitted on.
    pub fitted_on: Split,
    pub warnings: Vec<String>,
}

impl CalibrationModel {
    pub fn apply(&self, score: f64) -> f64 {
        match &self.calibrator {
            Calibrator::Platt { slope, intercept } => sigmoid(slope * score + intercept),
            Calibrator::Isotonic { breakpoints, values } => {
                let i = breakpoints.partition_point(|&b| b <= score);
                values[i.saturating_sub(1)]
            }
        }
    }

    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply(s)).collect()
    }

    pub fn method(&self) -> &'static str {
        match self.calibrator {
            Calibrator::Platt { .. } => "platt",
            Calibrator::Isotonic { .. } => "isotonic",
        }
    }
}

fn check_fit_split(split: Split) -> Result<(), EvalError> {
    match split {
        Split::Train | Split::Test => Err(EvalError::Provenance(format!(
            "calibration must be fitted on validation data, not {}",
            split.as_str()
        ))),
        Split::Val | Split::Unassigned => Ok(()),
    }
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite("calibration scores".into()));
    }
    if labels.iter().all(|&b| b) || labels.iter().all(|&b| !b) {
        return Err(EvalError::SingleClass);
    }
    Ok(())
}

fn logit_nll(scores: &[f64], labels: &[bool], a: f64, b: f64) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            let z = a * m + b;
            // -log sigmoid(+-z), computed stably
            let t = if y { -z } else { z };
            t.max(0.0) + (-t.abs()).exp().ln_1p()
        })
        .sum()
}

/// Maximum-likelihood logistic fit of `labels` on `scores` by damped Newton
/// iterations (step halving until the log-loss decreases).
pub fn platt_fit(scores: &[f64], labels: &[bool], fitted_on: Split) -> Result<CalibrationModel, EvalError> {
    check_binary(scores, labels)?;
    check_fit_split(fitted_on)?;
    let n = scores.len() as f64;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let prior = (pos / (n - pos)).ln();
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let mut warnings = Vec::new();
    if var == 0.0 {
        return Ok(CalibrationModel {
            calibrator: Calibrator::Platt {
                slope: 0.0,
                intercept: prior,
            },
            fitted_on,
            warnings,
        });
    }

    // (quasi-)separation makes the likelihood maximum infinite
    let extreme = |want: bool, hi: bool| {
        let it = scores.iter().zip(labels).filter(|(_, &y)| y == want).map(|(&s, _)| s);
        if hi {
            it.fold(f64::NEG_INFINITY, f64::max)
        } else {
            it.fold(f64::INFINITY, f64::min)
        }
    };
    let (max_neg, min_pos) = (extreme(false, true), extreme(true, false));
    let (max_pos, min_neg) = (extreme(true, true), extreme(false, false));
    let separated = if max_neg <= min_pos {
        Some((PLATT_SLOPE_CAP, (max_neg + min_pos) / 2.0))
    } else if max_pos <= min_neg {
        Some((-PLATT_SLOPE_CAP, (max_pos + min_neg) / 2.0))
    } else {
        None
    };
    if let Some((slope, boundary)) = separated {
        let msg = "scores separate the labels; Platt slope capped".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        return Ok(CalibrationModel {
            calibrator: Calibrator::Platt {
                slope,
                intercept: -slope * boundary,
            },
            fitted_on,
            warnings,
        });
    }

    let (mut a, mut b) = (0.0, prior);
    let mut loss = logit_nll(scores, labels, a, b);
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&m, &y) in scores.iter().zip(labels) {
            let p = sigmoid(a * m + b);
            let r = p - if y { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            ga += r * m;
            gb += r;
            haa += w * m * m;
            hab += w * m;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = if det > 1e-300 * haa.max(hbb).max(1.0) {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else {
            // flat curvature: fall back to a scaled gradient step
            (ga / (haa + 1e-12), gb / (hbb + 1e-12))
        };
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let (na, nb) = (a - step * da, b - step * db);
            let nl = logit_nll(scores, labels, na, nb);
            if nl <= loss {
                improved = nl < loss;
                a = na;
                b = nb;
                loss = nl;
                break;
            }
            step *= 0.5;
        }
        da *= step;
        db *= step;
        if a.abs() > PLATT_SLOPE_CAP {
            a = a.signum() * PLATT_SLOPE_CAP;
            let msg = "scores separate the labels; Platt slope capped".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
            break;
        }
        if !improved || (da.abs() < 1e-10 * (1.0 + a.abs()) && db.abs() < 1e-10 * (1.0 + b.abs())) {
            break;
        }
    }
    Ok(CalibrationModel {
        calibrator: Calibrator::Platt {
            slope: a,
            intercept: b,
        },
        fitted_on,
        warnings,
    })
}

/// Weighted pool-adjacent-violators fit of `targets` against `scores`.
/// Equal scores are pooled first; block values are kept as exact
/// (weighted sum, weight) pairs and divided once at the end.
pub fn isotonic_fit(
    scores: &[f64],
    targets: &[f64],
    weights: Option<&[f64]>,
    fitted_on: Split,
) -> Result<CalibrationModel, EvalError> {
    if scores.len() != targets.len() || weights.is_some_and(|w| w.len() != scores.len()) {
        return Err(EvalError::LengthMismatch("isotonic inputs differ in length".into()));
    }
    if scores.len() < 2 {
        return Err(EvalError::Empty);
    }
    check_fit_split(fitted_on)?;
    if scores.iter().chain(targets).any(|v| !v.is_finite()) || weights.is_some_and(|w| w.iter().any(|&v| !(v > 0.0))) {
        return Err(EvalError::NonFinite("isotonic inputs must be finite with positive weights".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));

    // (first score, weighted target sum, weight)
    let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
    let mut starts: Vec<f64> = Vec::new();
    for &i in &order {
        let w = weights.map_or(1.0, |w| w[i]);
        match blocks.last_mut() {
            Some(last) if starts.last() == Some(&scores[i]) => {
                last.1 += w * targets[i];
                last.2 += w;
            }
            _ => {
                blocks.push((scores[i], w * targets[i], w));
                starts.push(scores[i]);
            }
        }
    }
    // each tied-score group now becomes one PAVA element; remember its score
    let groups: Vec<f64> = blocks.iter().map(|b| b.0).collect();
    let mut stack: Vec<(usize, f64, f64)> = Vec::with_capacity(blocks.len()); // (first group, sum, weight)
    for (g, &(_, s, w)) in blocks.iter().enumerate() {
        stack.push((g, s, w));
        while stack.len() > 1 {
            let (_, s2, w2) = stack[stack.len() - 1];
            let (_, s1, w1) = stack[stack.len() - 2];
            if s1 / w1 > s2 / w2 {
                stack.pop();
                let last = stack.last_mut().unwrap();
                last.1 += s2;
                last.2 += w2;
            } else {
                break;
            }
        }
    }
    let mut breakpoints = Vec::with_capacity(groups.len());
    let mut values = Vec::with_capacity(groups.len());
    for (k, &(first, s, w)) in stack.iter().enumerate() {
        let end = stack.get(k + 1).map_or(groups.len(), |n| n.0);
        let v = s / w;
        for &g in &groups[first..end] {
            breakpoints.push(g);
            values.push(v);
        }
    }
    Ok(CalibrationModel {
        calibrator: Calibrator::Isotonic { breakpoints, values },
        fitted_on,
        warnings: Vec::new(),
    })
}

/// Expected calibration error over `bins` equal-width probability bins.
pub fn ece(probs: &[f64], labels: &[bool], bins: usize) -> Result<f64, EvalError> {
    Ok(reliability_bins(probs, labels, bins)?
        .iter()
        .map(|b| b.weight * (b.accuracy - b.confidence).abs())
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Fraction of all samples in this bin.
    pub weight: f64,
    pub confidence: f64,
    pub accuracy: f64,
}

pub fn reliability_bins(probs: &[f64], labels: &[bool], bins: usize) -> Result<Vec<ReliabilityBin>, EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(EvalError::NonFinite("probabilities must lie in [0, 1]".into()));
    }
    let bins = bins.max(1);
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        conf[b] += p;
        hits[b] += if y { 1.0 } else { 0.0 };
        count[b] += 1;
    }
    let n = probs.len().max(1) as f64;
    Ok((0..bins)
        .map(|b| {
            let c = count[b];
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: c,
                weight: c as f64 / n,
                confidence: if c > 0 { conf[b] / c as f64 } else { 0.0 },
                accuracy: if c > 0 { hits[b] / c as f64 } else { 0.0 },
            }
        })
        .collect())
}

pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut s = String::from("lower,upper,count,confidence,accuracy\n");
    for b in bins {
        s.push_str(&format!("{},{},{},{},{}\n", b.lower, b.upper, b.count, b.confidence, b.accuracy));
    }
    s
}

/// Per-class one-vs-rest calibration, renormalised onto the simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvrCalibrator {
    pub per_class: Vec<CalibrationModel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Platt,
    Isotonic,
}

impl OvrCalibrator {
    pub fn fit(
        probs: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        method: CalibrationMethod,
        fitted_on: Split,
    ) -> Result<Self, EvalError> {
        let per_class = (0..classes)
            .map(|k| {
                let col: Vec<f64> = probs.iter().map(|r| r[k]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
                match method {
                    CalibrationMethod::Platt => platt_fit(&col, &pos, fitted_on),
                    CalibrationMethod::Isotonic => {
                        let t: Vec<f64> = pos.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                        isotonic_fit(&col, &t, None, fitted_on)
                    }
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(OvrCalibrator { per_class })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = self.per_class.iter().zip(row).map(|(m, &p)| m.apply(p)).collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / raw.len() as f64; raw.len()]
        }
    }
}
