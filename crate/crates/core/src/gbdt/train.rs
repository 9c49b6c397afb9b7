use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Ensemble, GbdtConfig, GbdtError, StopMetric, Tree, TreeNode};
use crate::autodiff::sigmoid;
use crate::eval::{auc, macro_f1_from_labels};
use crate::split::{assign_splits, stratified_folds, Split};
use crate::tabular::DesignMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean unweighted logistic loss on the training rows.
    pub train_loss: f64,
    pub valid_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub ensemble: Ensemble,
    pub history: Vec<RoundRecord>,
    pub scale_pos_weight: f64,
    /// Number of trees kept and the validation metric they reach.
    pub best_rounds: usize,
    pub best_metric: Option<f64>,
}

fn logloss(margins: &[f64], y: &[usize]) -> f64 {
    margins
        .iter()
        .zip(y)
        .map(|(&m, &t)| {
            let z = if t == 1 { -m } else { m };
            z.max(0.0) + (-z.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / margins.len() as f64
}

pub(crate) fn metric_of(metric: StopMetric, margins: &[f64], y: &[usize]) -> Result<f64, GbdtError> {
    Ok(match metric {
        StopMetric::Auc => {
            let pos: Vec<bool> = y.iter().map(|&t| t == 1).collect();
            auc(margins, &pos)?.unwrap_or(0.5)
        }
        StopMetric::MacroF1 => {
            let pred: Vec<usize> = margins.iter().map(|&m| usize::from(m > 0.0)).collect();
            macro_f1_from_labels(y, &pred, 2)?
        }
    })
}

fn check_labels(y: &[usize]) -> Result<(usize, usize), GbdtError> {
    if let Some(row) = y.iter().position(|&t| t > 1) {
        return Err(GbdtError::BadLabel { row, label: y[row] });
    }
    let pos = y.iter().filter(|&&t| t == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(GbdtError::SingleClass);
    }
    Ok((pos, y.len() - pos))
}

/// Feature values in column-major order with per-feature presorted row
/// indices of observed values and the list of missing rows.
struct Columns {
    n: usize,
    values: Vec<f64>,
    sorted: Vec<Vec<u32>>,
    missing: Vec<Vec<u32>>,
}

impl Columns {
    fn new(x: &DesignMatrix) -> Columns {
        let n = x.rows;
        let mut values = vec![0.0; n * x.cols];
        for r in 0..n {
            for (f, &v) in x.row(r).iter().enumerate() {
                values[f * n + r] = v;
            }
        }
        let mut sorted = Vec::with_capacity(x.cols);
        let mut missing = Vec::with_capacity(x.cols);
        for f in 0..x.cols {
            let col = &values[f * n..(f + 1) * n];
            let (mut obs, miss): (Vec<u32>, Vec<u32>) = (0..n as u32).partition(|&r| !col[r as usize].is_nan());
            obs.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            sorted.push(obs);
            missing.push(miss);
        }
        Columns {
            n,
            values,
            sorted,
            missing,
        }
    }

    fn get(&self, r: usize, f: usize) -> f64 {
        self.values[f * self.n + r]
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
    gl: f64,
    hl: f64,
}

struct Open {
    node: usize,
    g: f64,
    h: f64,
    can_split: bool,
}

const NONE: u32 = u32::MAX;

fn grow_tree(cols: &Columns, g: &[f64], h: &[f64], rows: &[usize], features: &[usize], cfg: &GbdtConfig) -> Tree {
    let lambda = cfg.lambda;
    let mcw = cfg.min_child_weight;
    let score = |g: f64, h: f64| g * g / (h + lambda);
    let weight = |g: f64, h: f64| if h + lambda > 0.0 { -g / (h + lambda) } else { 0.0 };

    let mut pos = vec![NONE; cols.n];
    let (mut g0, mut h0) = (0.0, 0.0);
    for &r in rows {
        pos[r] = 0;
        g0 += g[r];
        h0 += h[r];
    }
    let mut tree = Tree::leaf(weight(g0, h0), h0);
    let mut open = vec![Open {
        node: 0,
        g: g0,
        h: h0,
        can_split: true,
    }];
    for _ in 0..cfg.max_depth {
        for o in open.iter_mut() {
            o.can_split = o.h >= 2.0 * mcw && o.h > 0.0;
        }
        let k = open.len();
        let mut best: Vec<Option<Candidate>> = vec![None; k];
        let (mut gm, mut hm, mut nm) = (vec![0.0; k], vec![0.0; k], vec![0usize; k]);
        let (mut gl, mut hl, mut last) = (vec![0.0; k], vec![0.0; k], vec![f64::NAN; k]);
        for &f in features {
            gm.iter_mut().for_each(|v| *v = 0.0);
            hm.iter_mut().for_each(|v| *v = 0.0);
            nm.iter_mut().for_each(|v| *v = 0);
            for &r in &cols.missing[f] {
                let a = pos[r as usize];
                if a != NONE {
                    gm[a as usize] += g[r as usize];
                    hm[a as usize] += h[r as usize];
                    nm[a as usize] += 1;
                }
            }
            gl.iter_mut().for_each(|v| *v = 0.0);
            hl.iter_mut().for_each(|v| *v = 0.0);
            last.iter_mut().for_each(|v| *v = f64::NAN);
            for &r in &cols.sorted[f] {
                let r = r as usize;
                let a = pos[r];
                if a == NONE || !open[a as usize].can_split {
                    continue;
                }
                let a = a as usize;
                let v = cols.get(r, f);
                if v > last[a] {
                    let o = &open[a];
                    let mut threshold = last[a] / 2.0 + v / 2.0;
                    if threshold <= last[a] {
                        threshold = v;
                    }
                    let parent = score(o.g, o.h);
                    let directions: &[bool] = if nm[a] > 0 { &[true, false] } else { &[true] };
                    for &default_left in directions {
                        let (l_g, l_h) = if default_left {
                            (gl[a] + gm[a], hl[a] + hm[a])
                        } else {
                            (gl[a], hl[a])
                        };
                        let (r_g, r_h) = (o.g - l_g, o.h - l_h);
                        if l_h < mcw || r_h < mcw || l_h <= 0.0 || r_h <= 0.0 {
                            continue;
                        }
                        let gain = 0.5 * (score(l_g, l_h) + score(r_g, r_h) - parent);
                        if best[a].is_none_or(|b| gain > b.gain) {
                            best[a] = Some(Candidate {
                                gain,
                                feature: f,
                                threshold,
                                default_left,
                                gl: l_g,
                                hl: l_h,
                            });
                        }
                    }
                }
                gl[a] += g[r];
                hl[a] += h[r];
                last[a] = v;
            }
            // every observed value left, missing rows alone on the right
            for (a, o) in open.iter().enumerate() {
                if nm[a] == 0 || !o.can_split || last[a].is_nan() {
                    continue;
                }
                let (l_g, l_h) = (gl[a], hl[a]);
                let (r_g, r_h) = (o.g - l_g, o.h - l_h);
                if l_h < mcw || r_h < mcw || l_h <= 0.0 || r_h <= 0.0 {
                    continue;
                }
                let gain = 0.5 * (score(l_g, l_h) + score(r_g, r_h) - score(o.g, o.h));
                if best[a].is_none_or(|b| gain > b.gain) {
                    best[a] = Some(Candidate {
                        gain,
                        feature: f,
                        threshold: last[a] + last[a].abs().max(1.0),
                        default_left: false,
                        gl: l_g,
                        hl: l_h,
                    });
                }
            }
        }

        let mut next = Vec::new();
        let mut remap = vec![NONE; 2 * k];
        for (a, o) in open.iter().enumerate() {
            let Some(c) = best[a].filter(|c| c.gain > 0.0) else {
                continue;
            };
            let left = tree.nodes.len();
            let (gr, hr) = (o.g - c.gl, o.h - c.hl);
            tree.nodes.push(TreeNode::Leaf {
                weight: weight(c.gl, c.hl),
                cover: c.hl,
            });
            tree.nodes.push(TreeNode::Leaf {
                weight: weight(gr, hr),
                cover: hr,
            });
            tree.nodes[o.node] = TreeNode::Split {
                feature: c.feature,
                threshold: c.threshold,
                default_left: c.default_left,
                left,
                right: left + 1,
                cover: o.h,
            };
            remap[2 * a] = next.len() as u32;
            next.push(Open {
                node: left,
                g: c.gl,
                h: c.hl,
                can_split: true,
            });
            remap[2 * a + 1] = next.len() as u32;
            next.push(Open {
                node: left + 1,
                g: gr,
                h: hr,
                can_split: true,
            });
        }
        if next.is_empty() {
            break;
        }
        for r in 0..cols.n {
            let a = pos[r];
            if a == NONE {
                continue;
            }
            let a = a as usize;
            pos[r] = match best[a].filter(|c| c.gain > 0.0) {
                None => NONE,
                Some(c) => {
                    let v = cols.get(r, c.feature);
                    let go_left = if v.is_nan() { c.default_left } else { v < c.threshold };
                    remap[2 * a + usize::from(!go_left)]
                }
            };
        }
        open = next;
    }
    tree
}

/// Boosts logistic-loss trees. With a validation set, training stops after
/// `patience` rounds without improvement and the best prefix is returned.
pub fn train_gbdt(
    x: &DesignMatrix,
    y: &[usize],
    cfg: &GbdtConfig,
    valid: Option<(&DesignMatrix, &[usize])>,
) -> Result<TrainOutput, GbdtError> {
    cfg.validate()?;
    if y.len() != x.rows {
        return Err(GbdtError::LengthMismatch(format!("{} labels for {} rows", y.len(), x.rows)));
    }
    let (pos, neg) = check_labels(y)?;
    if let Some((vx, vy)) = valid {
        if vx.cols != x.cols {
            return Err(GbdtError::FeatureCount {
                expected: x.cols,
                got: vx.cols,
            });
        }
        if vy.len() != vx.rows {
            return Err(GbdtError::LengthMismatch("validation labels".into()));
        }
        if let Some(row) = vy.iter().position(|&t| t > 1) {
            return Err(GbdtError::BadLabel { row, label: vy[row] });
        }
    }
    let spw = cfg.scale_pos_weight.unwrap_or(neg as f64 / pos as f64);
    let base_score = (spw * pos as f64 / neg as f64).ln();
    let mut ensemble = Ensemble {
        trees: Vec::new(),
        base_score,
        learning_rate: cfg.learning_rate,
        n_features: x.cols,
        feature_names: x.names.clone(),
    };
    let cols = Columns::new(x);
    let n = x.rows;
    let d = x.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut margins = vec![base_score; n];
    let mut vmargins = valid.map(|(vx, _)| vec![base_score; vx.rows]);
    let (mut g, mut h) = (vec![0.0; n], vec![0.0; n]);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let n_cols = ((cfg.colsample * d as f64).round() as usize).clamp(1, d.max(1));

    for round in 0..cfg.max_rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            let w = if y[i] == 1 { spw } else { 1.0 };
            g[i] = w * (p - y[i] as f64);
            h[i] = w * p * (1.0 - p);
        }
        let mut rows: Vec<usize> = if cfg.subsample < 1.0 {
            (0..n).filter(|_| rng.random_bool(cfg.subsample)).collect()
        } else {
            (0..n).collect()
        };
        if rows.is_empty() {
            rows = (0..n).collect();
        }
        let features: Vec<usize> = if n_cols < d {
            let mut f = rand::seq::index::sample(&mut rng, d, n_cols).into_vec();
            f.sort_unstable();
            f
        } else {
            (0..d).collect()
        };
        let tree = grow_tree(&cols, &g, &h, &rows, &features, cfg);
        for (i, m) in margins.iter_mut().enumerate() {
            *m += cfg.learning_rate * tree.predict(x.row(i));
        }
        let mut valid_metric = None;
        if let (Some((vx, vy)), Some(vm)) = (valid, vmargins.as_mut()) {
            for (i, m) in vm.iter_mut().enumerate() {
                *m += cfg.learning_rate * tree.predict(vx.row(i));
            }
            valid_metric = Some(metric_of(cfg.metric, vm, vy)?);
        }
        ensemble.trees.push(tree);
        history.push(RoundRecord {
            round: round + 1,
            train_loss: logloss(&margins, y),
            valid_metric,
        });
        if let Some(v) = valid_metric {
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, round + 1));
            }
            let (_, at) = best.unwrap();
            if round + 1 - at >= cfg.patience {
                break;
            }
        }
    }
    let best_rounds = best.map_or(ensemble.trees.len(), |(_, r)| r);
    ensemble.trees.truncate(best_rounds);
    Ok(TrainOutput {
        ensemble,
        history,
        scale_pos_weight: spw,
        best_rounds,
        best_metric: best.map(|(v, _)| v),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub auc: f64,
    pub macro_f1: f64,
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub assignment: Vec<usize>,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub mean_macro_f1: f64,
    pub sd_macro_f1: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Fraction of each training fold held back to drive early stopping.
pub const CV_MONITOR_FRACTION: f64 = 0.1;

/// Stratified k-fold evaluation. Early stopping inside a fold monitors a
/// stratified slice of that fold's training rows, never the held-out fold.
pub fn cross_validate(
    x: &DesignMatrix,
    y: &[usize],
    cfg: &GbdtConfig,
    k: usize,
    seed: u64,
) -> Result<CvReport, GbdtError> {
    check_labels(y)?;
    let assignment = stratified_folds(y, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| assignment[i] == fold);
        let ytrain: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let inner = assign_splits(
            &ytrain,
            &[1.0 - CV_MONITOR_FRACTION, CV_MONITOR_FRACTION],
            seed.wrapping_add(fold as u64 + 1),
            true,
        )?;
        let (fit, monitor): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&j| inner[j] == Split::Train);
        let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&j| train[j]).collect() };
        let (fit, monitor) = (pick(&fit), pick(&monitor));
        let (xt, xm, xv) = (x.select_rows(&fit), x.select_rows(&monitor), x.select_rows(&test));
        let yt: Vec<usize> = fit.iter().map(|&i| y[i]).collect();
        let ym: Vec<usize> = monitor.iter().map(|&i| y[i]).collect();
        let yv: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        let out = train_gbdt(&xt, &yt, cfg, Some((&xm, &ym)))?;
        let m = out.ensemble.predict_margin(&xv.data, xv.cols)?;
        folds.push(FoldResult {
            fold,
            auc: metric_of(StopMetric::Auc, &m, &yv)?,
            macro_f1: metric_of(StopMetric::MacroF1, &m, &yv)?,
            rounds: out.best_rounds,
        });
    }
    let (mean_auc, sd_auc) = mean_sd(&folds.iter().map(|f| f.auc).collect::<Vec<_>>());
    let (mean_macro_f1, sd_macro_f1) = mean_sd(&folds.iter().map(|f| f.macro_f1).collect::<Vec<_>>());
    Ok(CvReport {
        folds,
        assignment,
        mean_auc,
        sd_auc,
        mean_macro_f1,
        sd_macro_f1,
    })
}
