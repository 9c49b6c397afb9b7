use serde::{Deserialize, Serialize};

use super::{Ensemble, GbdtError, Tree, TreeNode};

/// Subset enumeration is exponential; the oracle refuses wider inputs.
pub const ORACLE_MAX_FEATURES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapValues {
    pub phi: Vec<f64>,
    /// Expected margin under the training covers.
    pub base_value: f64,
}

#[derive(Clone, Copy)]
struct PathElem {
    feature: usize,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: usize) {
    let l = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..l).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / (l + 1) as f64;
        path[i].weight = zero * path[i].weight * (l - i) as f64 / (l + 1) as f64;
    }
}

fn unwind(path: &mut Vec<PathElem>, index: usize) {
    let depth = path.len() - 1;
    let (one, zero) = (path[index].one, path[index].zero);
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let t = path[i].weight;
            path[i].weight = next * (depth + 1) as f64 / ((i + 1) as f64 * one);
            next = t - path[i].weight * zero * (depth - i) as f64 / (depth + 1) as f64;
        } else {
            path[i].weight = path[i].weight * (depth + 1) as f64 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElem], index: usize) -> f64 {
    let depth = path.len() - 1;
    let (one, zero) = (path[index].one, path[index].zero);
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let t = next * (depth + 1) as f64 / ((i + 1) as f64 * one);
            total += t;
            next = path[i].weight - t * zero * (depth - i) as f64 / (depth + 1) as f64;
        } else if zero != 0.0 {
            total += path[i].weight / zero * (depth + 1) as f64 / (depth - i) as f64;
        }
    }
    total
}

fn goes_left(v: f64, threshold: f64, default_left: bool) -> bool {
    if v.is_nan() {
        default_left
    } else {
        v < threshold
    }
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    node: usize,
    x: &[f64],
    phi: &mut [f64],
    scale: f64,
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: usize,
) {
    extend(&mut path, zero, one, feature);
    match tree.nodes[node] {
        TreeNode::Leaf { weight, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let e = path[i];
                phi[e.feature] += w * (e.one - e.zero) * weight * scale;
            }
        }
        TreeNode::Split {
            feature: f,
            threshold,
            default_left,
            left,
            right,
            cover,
        } => {
            let (hot, cold) = if goes_left(x[f], threshold, default_left) {
                (left, right)
            } else {
                (right, left)
            };
            let (mut iz, mut io) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == f) {
                iz = path[k].zero;
                io = path[k].one;
                unwind(&mut path, k);
            }
            let hot_frac = tree.nodes[hot].cover() / cover;
            let cold_frac = tree.nodes[cold].cover() / cover;
            recurse(tree, hot, x, phi, scale, path.clone(), iz * hot_frac, io, f);
            recurse(tree, cold, x, phi, scale, path, iz * cold_frac, 0.0, f);
        }
    }
}

/// Cover-weighted mean leaf value.
fn expected_value(tree: &Tree, node: usize) -> f64 {
    match tree.nodes[node] {
        TreeNode::Leaf { weight, .. } => weight,
        TreeNode::Split { left, right, cover, .. } => {
            (tree.nodes[left].cover() * expected_value(tree, left)
                + tree.nodes[right].cover() * expected_value(tree, right))
                / cover
        }
    }
}

/// Path-dependent TreeSHAP over the ensemble, leaf values scaled by the
/// learning rate. `base_value + sum(phi)` reproduces the margin.
pub fn tree_shap(ensemble: &Ensemble, x: &[f64]) -> Result<ShapValues, GbdtError> {
    if x.len() != ensemble.n_features {
        return Err(GbdtError::FeatureCount {
            expected: ensemble.n_features,
            got: x.len(),
        });
    }
    let mut phi = vec![0.0; ensemble.n_features];
    let mut base_value = ensemble.base_score;
    for t in &ensemble.trees {
        base_value += ensemble.learning_rate * expected_value(t, 0);
        if t.nodes.len() > 1 {
            recurse(t, 0, x, &mut phi, ensemble.learning_rate, Vec::new(), 1.0, 1.0, usize::MAX);
        }
    }
    Ok(ShapValues { phi, base_value })
}

/// Value of a feature subset: known features follow `x`, unknown ones average
/// their children by cover.
fn subset_value(tree: &Tree, node: usize, x: &[f64], known: u32) -> f64 {
    match tree.nodes[node] {
        TreeNode::Leaf { weight, .. } => weight,
        TreeNode::Split {
            feature,
            threshold,
            default_left,
            left,
            right,
            cover,
        } => {
            if known & (1 << feature) != 0 {
                let next = if goes_left(x[feature], threshold, default_left) {
                    left
                } else {
                    right
                };
                subset_value(tree, next, x, known)
            } else {
                (tree.nodes[left].cover() * subset_value(tree, left, x, known)
                    + tree.nodes[right].cover() * subset_value(tree, right, x, known))
                    / cover
            }
        }
    }
}

/// Shapley values by enumerating every feature subset.
pub fn exact_shap_oracle(ensemble: &Ensemble, x: &[f64]) -> Result<ShapValues, GbdtError> {
    let m = ensemble.n_features;
    if m > ORACLE_MAX_FEATURES {
        return Err(GbdtError::TooManyFeatures(format!(
            "exact Shapley enumeration supports at most {ORACLE_MAX_FEATURES} features, got {m}"
        )));
    }
    if x.len() != m {
        return Err(GbdtError::FeatureCount {
            expected: m,
            got: x.len(),
        });
    }
    let value = |s: u32| -> f64 {
        ensemble
            .trees
            .iter()
            .map(|t| ensemble.learning_rate * subset_value(t, 0, x, s))
            .sum::<f64>()
    };
    let values: Vec<f64> = (0..1u32 << m).map(value).collect();
    // |S|! (m - |S| - 1)! / m!
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let coef: Vec<f64> = (0..m).map(|s| fact(s) * fact(m - s - 1) / fact(m)).collect();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        for s in 0..1u32 << m {
            if s & bit == 0 {
                *p += coef[s.count_ones() as usize] * (values[(s | bit) as usize] - values[s as usize]);
            }
        }
    }
    Ok(ShapValues {
        phi,
        base_value: ensemble.base_score + values[0],
    })
}

/// Mean |phi| per feature over `rows`, as (feature, importance) sorted by
/// decreasing importance, ties by feature index.
pub fn global_importance(ensemble: &Ensemble, rows: &[f64], cols: usize) -> Result<Vec<(usize, f64)>, GbdtError> {
    if cols != ensemble.n_features {
        return Err(GbdtError::FeatureCount {
            expected: ensemble.n_features,
            got: cols,
        });
    }
    let mut total = vec![0.0; cols];
    let mut n = 0usize;
    for r in rows.chunks(cols.max(1)) {
        let s = tree_shap(ensemble, r)?;
        for (t, p) in total.iter_mut().zip(&s.phi) {
            *t += p.abs();
        }
        n += 1;
    }
    let mut out: Vec<(usize, f64)> = total.into_iter().map(|t| t / n.max(1) as f64).enumerate().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// `row_id,feature,phi` rows, preceded by one `base_value` row per sample.
pub fn attribution_csv(ensemble: &Ensemble, row_ids: &[String], rows: &[f64]) -> Result<String, GbdtError> {
    let cols = ensemble.n_features;
    let mut s = String::from("row_id,feature,phi\n");
    for (id, r) in row_ids.iter().zip(rows.chunks(cols.max(1))) {
        let v = tree_shap(ensemble, r)?;
        s.push_str(&format!("{id},base_value,{}\n", v.base_value));
        for (name, p) in ensemble.feature_names.iter().zip(&v.phi) {
            s.push_str(&format!("{id},{name},{p}\n"));
        }
    }
    Ok(s)
}
