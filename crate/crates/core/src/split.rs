//! Seeded, optionally stratified dataset splitting and k-fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    /// Split for the `i`-th requested fraction.
    pub fn from_index(i: usize) -> Split {
        match i {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            _ => Split::Unassigned,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SplitError {
    #[error("split fractions {0:?} must be nonnegative, at most three, and sum to 1")]
    BadFractions(Vec<f64>),
    #[error("class {class} has {count} members, fewer than the {k} folds requested")]
    ClassTooSmall { class: usize, count: usize, k: usize },
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
}

/// Splits `n` items by `fractions` with floor-then-largest-remainder rounding;
/// remainder ties go to the earlier split.
pub fn allocate(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

fn check_fractions(fractions: &[f64]) -> Result<(), SplitError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty()
        || fractions.len() > 3
        || fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0))
        || (sum - 1.0).abs() > 1e-9
    {
        return Err(SplitError::BadFractions(fractions.to_vec()));
    }
    Ok(())
}

/// Assigns every item to a split. With `stratify`, each label is split on its
/// own, so per-class counts hit the fractions within one item; otherwise all
/// items form a single stratum. Deterministic in `seed`.
pub fn assign_splits(labels: &[usize], fractions: &[f64], seed: u64, stratify: bool) -> Result<Vec<Split>, SplitError> {
    check_fractions(fractions)?;
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        strata.entry(if stratify { l } else { 0 }).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Unassigned; labels.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), fractions);
        let mut it = members.iter();
        for (s, &c) in counts.iter().enumerate() {
            for &i in it.by_ref().take(c) {
                out[i] = Split::from_index(s);
            }
        }
    }
    Ok(out)
}

/// Stratified k-fold assignment: within each class, shuffled members are dealt
/// round-robin, so every fold's class count is within one of the others.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>, SplitError> {
    if k < 2 {
        return Err(SplitError::TooFewFolds(k));
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        strata.entry(l).or_default().push(i);
    }
    if let Some((&class, m)) = strata.iter().find(|(_, m)| m.len() < k) {
        return Err(SplitError::ClassTooSmall {
            class,
            count: m.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut offset = 0;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            folds[i] = (j + offset) % k;
        }
        // rotate so the larger folds do not always come first
        offset += members.len();
    }
    Ok(folds)
}
