#![allow(dead_code)]
//! Brute-force reference implementations and generators shared by the
//! integration tests.

use fusiondx_core::gbdt::{Ensemble, Tree, TreeNode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mann-Whitney pair count with half credit for ties.
pub fn pair_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0u64);
    for (i, &yi) in positive.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in positive.iter().enumerate() {
            if yj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

/// Least-squares nondecreasing fit of `y` (already in score order, distinct
/// scores) by trying every partition into contiguous blocks.
pub fn brute_isotonic(y: &[f64], w: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = vec![0.0; n];
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let sw: f64 = w[start..end].iter().sum();
                let sy: f64 = (start..end).map(|i| w[i] * y[i]).sum();
                let m = sy / sw;
                if m < prev {
                    ok = false;
                    break;
                }
                prev = m;
                fit[start..end].iter_mut().for_each(|f| *f = m);
                start = end;
            }
        }
        if !ok {
            continue;
        }
        let sse: f64 = (0..n).map(|i| w[i] * (y[i] - fit[i]).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    best.unwrap().1
}

/// Operating point of the rule `score > t`.
pub fn rates_at(scores: &[f64], positive: &[bool], t: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut p, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &y) in scores.iter().zip(positive) {
        if y {
            p += 1.0;
        } else {
            n += 1.0;
        }
        if s > t {
            if y {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    (tp / p, 1.0 - fp / n, precision)
}

/// Every midpoint between distinct sorted scores, ascending.
pub fn midpoints(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.windows(2).map(|w| w[0] / 2.0 + w[1] / 2.0).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Every (label sequence, tie pattern) over `n` ranks, positions shuffled.
pub fn for_each_tie_pattern(n: usize, mut f: impl FnMut(&[f64], &[bool])) {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let mut scores = vec![0.0; n];
    let mut labels = vec![false; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for lmask in 0u32..(1 << n) {
        for tmask in 0u32..(1 << (n - 1)) {
            perm.swap(rng.random_range(0..n), rng.random_range(0..n));
            let mut level = 0.0;
            for r in 0..n {
                if r > 0 && tmask & (1 << (r - 1)) == 0 {
                    level += 1.0;
                }
                scores[perm[r]] = level / 8.0;
                labels[perm[r]] = lmask & (1 << r) != 0;
            }
            f(&scores, &labels);
        }
    }
}

/// Random tree with consistent covers; features drawn from `0..m`.
pub fn random_tree(rng: &mut ChaCha8Rng, m: usize, max_depth: usize, max_leaves: usize) -> Tree {
    fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<TreeNode>, at: usize, depth: usize, m: usize, leaves: &mut usize, max: usize) {
        if depth == 0 || *leaves >= max || rng.random_bool(0.25) {
            return;
        }
        *leaves += 1;
        let cover = nodes[at].cover();
        let frac = rng.random_range(0.1..0.9);
        let left = nodes.len();
        for c in [cover * frac, cover * (1.0 - frac)] {
            nodes.push(TreeNode::Leaf {
                weight: rng.random_range(-2.0..2.0),
                cover: c,
            });
        }
        nodes[at] = TreeNode::Split {
            feature: rng.random_range(0..m),
            threshold: rng.random_range(-1.0..1.0),
            default_left: rng.random_bool(0.5),
            left,
            right: left + 1,
            cover,
        };
        grow(rng, nodes, left, depth - 1, m, leaves, max);
        grow(rng, nodes, left + 1, depth - 1, m, leaves, max);
    }
    let mut nodes = vec![TreeNode::Leaf {
        weight: rng.random_range(-2.0..2.0),
        cover: rng.random_range(10.0..100.0),
    }];
    let mut leaves = 1;
    grow(rng, &mut nodes, 0, max_depth, m, &mut leaves, max_leaves);
    Tree { nodes }
}

pub fn random_ensemble(rng: &mut ChaCha8Rng, m: usize) -> Ensemble {
    let mut e = Ensemble::empty(rng.random_range(-1.0..1.0), rng.random_range(0.05..1.0), m);
    for _ in 0..rng.random_range(1..=10) {
        e.trees.push(random_tree(rng, m, 3, 8));
    }
    e
}

pub fn random_row(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m)
        .map(|_| if rng.random_bool(0.1) { f64::NAN } else { rng.random_range(-1.5..1.5) })
        .collect()
}
