//! Second-order gradient-boosted trees for binary logistic classification,
//! with learned missing-value directions and TreeSHAP attribution.

mod shap;
mod train;

use serde::{Deserialize, Serialize};

pub use shap::{attribution_csv, exact_shap_oracle, global_importance, tree_shap, ShapValues, ORACLE_MAX_FEATURES};
pub use train::{cross_validate, CV_MONITOR_FRACTION, train_gbdt, CvReport, FoldResult, RoundRecord, TrainOutput};

use crate::eval::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        /// Values strictly below go left.
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
        /// Hessian mass of the training rows reaching this node.
        cover: f64,
    },
    Leaf {
        weight: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => *cover,
        }
    }
}

/// Nodes in creation order; the root is node 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(weight: f64, cover: f64) -> Tree {
        Tree {
            nodes: vec![TreeNode::Leaf { weight, cover }],
        }
    }

    /// Index of the leaf `x` lands in; NaN follows the default direction.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            TreeNode::Leaf { weight, .. } => weight,
            _ => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub trees: Vec<Tree>,
    /// Prior log-odds the trees start from.
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub feature_names: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum GbdtError {
    #[error("labels must contain both classes")]
    SingleClass,
    #[error("label {label} at row {row} is not 0 or 1")]
    BadLabel { row: usize, label: usize },
    #[error("expected {expected} features, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    TooManyFeatures(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Split(#[from] crate::split::SplitError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl Ensemble {
    pub fn empty(base_score: f64, learning_rate: f64, n_features: usize) -> Ensemble {
        Ensemble {
            trees: Vec::new(),
            base_score,
            learning_rate,
            n_features,
            feature_names: (0..n_features).map(|i| format!("f{i}")).collect(),
        }
    }

    fn check_row(&self, x: &[f64]) -> Result<(), GbdtError> {
        if x.len() != self.n_features {
            return Err(GbdtError::FeatureCount {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `base + sum of learning_rate * leaf`, accumulated tree by tree.
    pub fn margin_row(&self, x: &[f64]) -> Result<f64, GbdtError> {
        self.check_row(x)?;
        let mut m = self.base_score;
        for t in &self.trees {
            m += self.learning_rate * t.predict(x);
        }
        Ok(m)
    }

    /// Margins for a row-major matrix with `n_features` columns.
    pub fn predict_margin(&self, data: &[f64], cols: usize) -> Result<Vec<f64>, GbdtError> {
        if cols != self.n_features {
            return Err(GbdtError::FeatureCount {
                expected: self.n_features,
                got: cols,
            });
        }
        data.chunks(cols.max(1)).map(|r| self.margin_row(r)).collect()
    }

    pub fn predict_proba(&self, data: &[f64], cols: usize) -> Result<Vec<f64>, GbdtError> {
        Ok(self
            .predict_margin(data, cols)?
            .into_iter()
            .map(crate::autodiff::sigmoid)
            .collect())
    }

    pub fn truncated(&self, rounds: usize) -> Ensemble {
        Ensemble {
            trees: self.trees[..rounds.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ensemble serializes")
    }

    pub fn validate(&self) -> Result<(), GbdtError> {
        for (ti, t) in self.trees.iter().enumerate() {
            for n in &t.nodes {
                if let TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    cover,
                    ..
                } = n
                {
                    let bad = |m: &str| Err(GbdtError::InvalidConfig(format!("tree {ti}: {m}")));
                    if *feature >= self.n_features {
                        return bad("feature index out of range");
                    }
                    if !threshold.is_finite() {
                        return bad("non-finite threshold");
                    }
                    if *left >= t.nodes.len() || *right >= t.nodes.len() {
                        return bad("child index out of range");
                    }
                    let sum = t.nodes[*left].cover() + t.nodes[*right].cover();
                    if (sum - cover).abs() > 1e-9 * cover.abs().max(1.0) {
                        return bad("cover is not the sum of its children");
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    Auc,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub max_rounds: usize,
    pub subsample: f64,
    pub colsample: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
    /// `None` uses negatives / positives.
    pub scale_pos_weight: Option<f64>,
    pub patience: usize,
    pub metric: StopMetric,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            max_depth: 6,
            learning_rate: 0.05,
            max_rounds: 500,
            subsample: 0.8,
            colsample: 0.8,
            lambda: 1.0,
            min_child_weight: 1.0,
            scale_pos_weight: None,
            patience: 50,
            metric: StopMetric::Auc,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: &str| Err(GbdtError::InvalidConfig(m.to_string()));
        if self.max_depth < 1 {
            return bad("max_depth must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) || !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return bad("subsample fractions must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return bad("lambda and min_child_weight must be nonnegative");
        }
        if self.scale_pos_weight.is_some_and(|w| !(w > 0.0 && w.is_finite())) {
            return bad("scale_pos_weight must be positive");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}
