use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_of, eval_node_chunked, Model, NeuralError, IMAGE_INPUT, TARGETS};
use crate::autodiff::{log_softmax, sigmoid, softmax_rows, AdamConfig, AdamState, Feed, Mode, Tensor};
use crate::eval::{argmax, macro_f1_from_labels};
use crate::patch::{augment, patch_rng, AugmentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImbalanceMode {
    ClassWeights,
    WeightedSampler,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPolicy {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub imbalance: ImbalanceMode,
    /// Epochs without a validation macro-F1 improvement before stopping.
    /// Written as 0 when absent so config files round-trip.
    #[serde(with = "patience_field")]
    pub patience: Option<usize>,
    pub seed: u64,
    /// Applied to the `image` input only, drawn per patch id and epoch.
    pub augment: Option<AugmentConfig>,
    /// Probability cut for single-logit decisions.
    pub decision_threshold: f64,
}

mod patience_field {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let v = usize::deserialize(d)?;
        Ok((v > 0).then_some(v))
    }
}

impl Default for TrainPolicy {
    fn default() -> Self {
        TrainPolicy {
            optimizer: AdamConfig::with_lr(1e-3),
            batch_size: 64,
            max_epochs: 10,
            imbalance: ImbalanceMode::ClassWeights,
            patience: Some(5),
            seed: 0,
            augment: None,
            decision_threshold: 0.5,
        }
    }
}

impl TrainPolicy {
    pub fn cnn() -> Self {
        TrainPolicy::default()
    }

    pub fn mlp() -> Self {
        TrainPolicy {
            optimizer: AdamConfig {
                weight_decay: 1e-4,
                ..AdamConfig::with_lr(1e-3)
            },
            batch_size: 256,
            ..TrainPolicy::default()
        }
    }

    pub fn fusion() -> Self {
        TrainPolicy {
            optimizer: AdamConfig::with_lr(1e-4),
            ..TrainPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch budget must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1");
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return bad("decision threshold must lie in (0, 1)");
        }
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| NeuralError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

/// Stacked model inputs with one label and one id per row.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Feed,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn new(inputs: Feed, labels: Vec<usize>, ids: Vec<String>) -> Result<Dataset, NeuralError> {
        for (k, t) in &inputs {
            if t.batch() != labels.len() {
                return Err(NeuralError::InvalidData(format!(
                    "input `{k}` has {} rows for {} labels",
                    t.batch(),
                    labels.len()
                )));
            }
        }
        if ids.len() != labels.len() {
            return Err(NeuralError::InvalidData("one id per row required".into()));
        }
        Ok(Dataset { inputs, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.iter().map(|(k, t)| (k.clone(), t.select_rows(idx))).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                c[l] += 1;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_macro_f1: Option<f64>,
    pub stopped_early: bool,
}

/// `w_i = sum(c) / (K * c_i)`; a balanced count vector gives all ones.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>, NeuralError> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(NeuralError::InvalidData(format!(
            "class weights need a positive count for every class, got {counts:?}"
        )));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len();
    Ok(counts.iter().map(|&c| total as f64 / (k * c) as f64).collect())
}

/// `n` row indices drawn with replacement, each row weighted by the weight of its class.
pub fn weighted_sample(labels: &[usize], weights: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>, NeuralError> {
    let per_row: Vec<f64> = labels
        .iter()
        .map(|&l| weights.get(l).copied().ok_or_else(|| NeuralError::InvalidData(format!("label {l} has no weight"))))
        .collect::<Result<_, _>>()?;
    let dist = WeightedIndex::new(&per_row).map_err(|e| NeuralError::InvalidData(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc,val_macro_f1\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.train_acc,
            opt(r.val_loss),
            opt(r.val_acc),
            opt(r.val_macro_f1)
        ));
    }
    s
}

/// Class probabilities in eval mode; single-logit models give `[1 - p, p]`.
pub fn predict_proba(model: &Model, inputs: &Feed) -> Result<Vec<Vec<f64>>, NeuralError> {
    let logits = eval_node_chunked(model, inputs, model.meta.logits)?;
    Ok(if model.meta.single_logit {
        logits
            .data()
            .iter()
            .map(|&z| {
                let p = sigmoid(z);
                vec![1.0 - p, p]
            })
            .collect()
    } else {
        softmax_rows(&logits)
    })
}

fn decide(model: &Model, row: &[f64], threshold: f64) -> usize {
    if model.meta.single_logit {
        usize::from(sigmoid(row[0]) >= threshold)
    } else {
        argmax(row)
    }
}

fn row_loss(model: &Model, row: &[f64], y: usize) -> f64 {
    if model.meta.single_logit {
        let z = if y == 1 { -row[0] } else { row[0] };
        z.max(0.0) + (-z.abs()).exp().ln_1p()
    } else {
        -log_softmax(row)[y]
    }
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | batch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Splits an epoch order into batches; a trailing batch of one row joins the
/// previous batch so batchnorm always sees at least two rows.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn batch_feed(data: &Dataset, idx: &[usize], policy: &TrainPolicy, epoch: usize) -> Result<Feed, NeuralError> {
    let mut feed = Feed::new();
    for (k, t) in &data.inputs {
        let mut part = t.select_rows(idx);
        if let (Some(cfg), true) = (&policy.augment, k == IMAGE_INPUT) {
            let sample_shape = t.shape()[1..].to_vec();
            let len = part.row_len();
            for (r, &i) in idx.iter().enumerate() {
                let one = Tensor::new(sample_shape.clone(), part.row(r).to_vec())?;
                let mut rng = patch_rng(policy.seed, &data.ids[i], epoch as u64);
                let out = augment(&one, cfg, &mut rng);
                part.data_mut()[r * len..(r + 1) * len].copy_from_slice(out.data());
            }
        }
        feed.insert(k.clone(), part);
    }
    feed.insert(
        TARGETS.to_string(),
        Tensor::new(vec![idx.len()], idx.iter().map(|&i| data.labels[i] as f64).collect())?,
    );
    Ok(feed)
}

/// Every parameter value, running statistics included.
fn snapshot(model: &Model) -> Vec<Vec<f64>> {
    model.graph.params().iter().map(|p| p.tensor.data().to_vec()).collect()
}

struct ValStats {
    loss: f64,
    acc: f64,
    macro_f1: f64,
}

fn validate_on(model: &Model, val: &Dataset, threshold: f64) -> Result<ValStats, NeuralError> {
    let logits = eval_node_chunked(model, &val.inputs, model.meta.logits)?;
    let n = val.len();
    let mut loss = 0.0;
    let mut pred = Vec::with_capacity(n);
    for (r, &y) in val.labels.iter().enumerate() {
        let row = logits.row(r);
        loss += row_loss(model, row, y);
        pred.push(decide(model, row, threshold));
    }
    let correct = pred.iter().zip(&val.labels).filter(|(p, y)| p == y).count();
    Ok(ValStats {
        loss: loss / n as f64,
        acc: correct as f64 / n as f64,
        macro_f1: macro_f1_from_labels(&val.labels, &pred, model.meta.classes)?,
    })
}

/// Minibatch Adam training. With validation data, the model with the highest
/// validation macro-F1 (first epoch reaching it) is returned, and training
/// stops after `patience` epochs without a strict improvement.
pub fn train_model(
    mut model: Model,
    train: &Dataset,
    val: Option<&Dataset>,
    policy: &TrainPolicy,
) -> Result<TrainOutcome, NeuralError> {
    policy.validate()?;
    let n = train.len();
    if n < 2 {
        return Err(NeuralError::InvalidData("training needs at least two rows".into()));
    }
    batch_of(&model, &train.inputs)?;
    let k = model.meta.classes;
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= k) {
        return Err(NeuralError::InvalidData(format!("label {bad} outside {k} classes")));
    }
    if let Some(v) = val {
        if v.is_empty() {
            return Err(NeuralError::InvalidData("validation set is empty".into()));
        }
        batch_of(&model, &v.inputs)?;
    } else if policy.patience.is_some() {
        log::info!("no validation data; early stopping disabled");
    }

    let counts = train.class_counts(k);
    match policy.imbalance {
        ImbalanceMode::ClassWeights if model.meta.single_logit => {
            return Err(NeuralError::InvalidConfig(
                "single-logit models take their imbalance weight from pos_weight".into(),
            ));
        }
        ImbalanceMode::ClassWeights => model.graph.set_class_weights(Some(class_weights(&counts)?))?,
        ImbalanceMode::WeightedSampler => {
            class_weights(&counts)?;
        }
        ImbalanceMode::None => {}
    }
    let sampler_weights = match policy.imbalance {
        ImbalanceMode::WeightedSampler => Some(class_weights(&counts)?),
        _ => None,
    };

    let mut adam = AdamState::new(policy.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let loss_node = model.meta.loss;
    let logits_node = model.meta.logits;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=policy.max_epochs {
        let order: Vec<usize> = match &sampler_weights {
            Some(w) => weighted_sample(&train.labels, w, n, &mut rng)?,
            None => {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            }
        };
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in batches(&order, policy.batch_size).iter().enumerate() {
            let feed = batch_feed(train, idx, policy, epoch)?;
            model.graph.forward(
                &feed,
                Mode::Train {
                    seed: batch_seed(policy.seed, epoch, b),
                },
            )?;
            let loss = model.graph.value(loss_node).expect("loss computed").data()[0];
            if !loss.is_finite() {
                return Err(NeuralError::NonFiniteLoss { epoch, batch: b });
            }
            let logits = model.graph.value(logits_node).expect("logits computed");
            for (r, &i) in idx.iter().enumerate() {
                correct += usize::from(decide(&model, logits.row(r), policy.decision_threshold) == train.labels[i]);
            }
            loss_sum += loss * idx.len() as f64;
            model.graph.backward(loss_node)?;
            adam.step_graph(&mut model.graph)?;
        }
        model.meta.trained = true;
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_loss: None,
            val_acc: None,
            val_macro_f1: None,
        };
        if let Some(v) = val {
            let s = validate_on(&model, v, policy.decision_threshold)?;
            record.val_loss = Some(s.loss);
            record.val_acc = Some(s.acc);
            record.val_macro_f1 = Some(s.macro_f1);
            if best.as_ref().is_none_or(|(f, _, _)| s.macro_f1 > *f) {
                best = Some((s.macro_f1, epoch, snapshot(&model)));
            }
        }
        log::debug!("epoch {epoch}: {record:?}");
        history.push(record);
        if let (Some(p), Some((_, at, _))) = (policy.patience, &best) {
            if epoch - at >= p {
                stopped_early = epoch < policy.max_epochs;
                break;
            }
        }
    }
    let (best_val_macro_f1, best_epoch) = match &best {
        Some((f, e, _)) => (Some(*f), Some(*e)),
        None => (None, None),
    };
    if let Some((_, _, values)) = best {
        for (p, v) in model.graph.params_mut().iter_mut().zip(values) {
            p.tensor.data_mut().copy_from_slice(&v);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_macro_f1,
        stopped_early,
    })
}
