use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdKind {
    Youden,
    PrecisionTarget { target: f64 },
}

/// Decision rule `score > threshold` plus the operating point it achieved on
/// the data it was chosen from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub kind: ThresholdKind,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// Set when a precision target could not be met.
    pub target_unmet: bool,
}

impl ThresholdPolicy {
    pub fn youden_j(&self) -> f64 {
        self.sensitivity + self.specificity - 1.0
    }

    pub fn decide(&self, score: f64) -> bool {
        score > self.threshold
    }
}

struct Candidate {
    threshold: f64,
    tp: u64,
    fp: u64,
}

/// Midpoints between adjacent distinct scores, from the largest down, with the
/// counts of positives and negatives scoring above each. A single distinct
/// score yields that score as the only candidate.
fn candidates(scores: &[f64], labels: &[bool]) -> Result<(Vec<Candidate>, u64, u64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite("threshold scores".into()));
    }
    let p = labels.iter().filter(|&&b| b).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if i < order.len() {
            out.push(Candidate {
                threshold: s / 2.0 + scores[order[i]] / 2.0,
                tp,
                fp,
            });
        }
    }
    if out.is_empty() {
        out.push(Candidate {
            threshold: scores[0],
            tp: 0,
            fp: 0,
        });
    }
    Ok((out, p, n))
}

fn policy(kind: ThresholdKind, c: &Candidate, p: u64, n: u64, target_unmet: bool) -> ThresholdPolicy {
    ThresholdPolicy {
        kind,
        threshold: c.threshold,
        sensitivity: c.tp as f64 / p as f64,
        specificity: (n - c.fp) as f64 / n as f64,
        precision: precision(c),
        target_unmet,
    }
}

fn precision(c: &Candidate) -> f64 {
    if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

/// Threshold maximising sensitivity + specificity - 1; ties go to the larger
/// threshold.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdPolicy, EvalError> {
    let (cands, p, n) = candidates(scores, labels)?;
    // compare J exactly as tp*n - fp*p
    let j = |c: &Candidate| c.tp as i128 * n as i128 - c.fp as i128 * p as i128;
    let mut best = &cands[0];
    for c in &cands[1..] {
        if j(c) > j(best) {
            best = c;
        }
    }
    Ok(policy(ThresholdKind::Youden, best, p, n, false))
}

/// Smallest candidate threshold whose precision reaches `target`. When none
/// does, the smallest threshold of maximal precision is returned flagged.
pub fn precision_target_threshold(scores: &[f64], labels: &[bool], target: f64) -> Result<ThresholdPolicy, EvalError> {
    if !(0.0..=1.0).contains(&target) {
        return Err(EvalError::InvalidArgument(format!("precision target {target} outside [0, 1]")));
    }
    let (cands, p, n) = candidates(scores, labels)?;
    let kind = ThresholdKind::PrecisionTarget { target };
    if let Some(c) = cands.iter().rev().find(|c| precision(c) >= target) {
        return Ok(policy(kind, c, p, n, false));
    }
    let mut best = cands.last().unwrap();
    for c in cands.iter().rev() {
        if precision(c) > precision(best) {
            best = c;
        }
    }
    Ok(policy(kind, best, p, n, true))
}
