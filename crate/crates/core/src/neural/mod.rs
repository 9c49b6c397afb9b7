//! The three differentiable models (image CNN, tabular MLP, fusion head),
//! their training loop, embedding extraction and Grad-CAM.

mod gradcam;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Feed, Graph, GraphError, NodeId, Tensor};

pub use gradcam::{bilinear_upsample, grad_cam, heatmap_png, overlay_png, GradCam};
pub use train::{
    class_weights, history_csv, predict_proba, train_model, weighted_sample, Dataset, EpochRecord, ImbalanceMode,
    TrainOutcome, TrainPolicy,
};

pub const IMAGE_INPUT: &str = "image";
pub const TABULAR_INPUT: &str = "tabular";
pub const IMAGE_EMBEDDING_INPUT: &str = "image_embedding";
pub const TABULAR_EMBEDDING_INPUT: &str = "tabular_embedding";
pub const TARGETS: &str = "targets";

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("image encoding: {0}")]
    Image(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimpleCnnConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub dropout: f64,
    pub classes: usize,
    /// Pixels in [0, 1] enter the first conv as `(x - input_shift) * input_scale`.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for SimpleCnnConfig {
    fn default() -> Self {
        SimpleCnnConfig {
            in_channels: 3,
            input_size: 64,
            channels: vec![32, 64, 128],
            hidden: 256,
            dropout: 0.5,
            classes: 3,
            input_shift: 0.5,
            input_scale: 2.0,
        }
    }
}

impl SimpleCnnConfig {
    /// Spatial side of the last pooled map.
    pub fn final_side(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    pub fn flatten_width(&self) -> usize {
        self.channels.last().copied().unwrap_or(self.in_channels) * self.final_side().pow(2)
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: String| Err(NeuralError::InvalidConfig(m));
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return bad("conv channels must be positive and nonempty".into());
        }
        let scale = 1usize << self.channels.len();
        if self.input_size == 0 || self.input_size % scale != 0 {
            return bad(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size,
                self.channels.len()
            ));
        }
        if self.hidden == 0 || self.classes < 2 {
            return bad("hidden width must be positive and classes at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.input_shift.is_finite() && self.input_scale.is_finite() && self.input_scale != 0.0) {
            return bad(format!("input shift {} / scale {} invalid", self.input_shift, self.input_scale));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpOutput {
    /// K-logit softmax cross-entropy.
    Softmax,
    /// One logit trained with binary cross-entropy.
    SingleLogit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub output: MlpOutput,
    pub classes: usize,
    /// Positive-class weight for the single-logit loss.
    pub pos_weight: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_width: 1,
            hidden: vec![256, 128],
            dropout: 0.3,
            output: MlpOutput::Softmax,
            classes: 2,
            pos_weight: 1.0,
        }
    }
}

impl MlpConfig {
    pub fn embedding_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_width)
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidConfig(m.to_string()));
        if self.input_width == 0 {
            return bad("input width must be at least 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive and nonempty");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout outside [0, 1)");
        }
        if self.output == MlpOutput::SingleLogit && self.classes != 2 {
            return bad("single-logit mode is binary");
        }
        if self.classes < 2 {
            return bad("at least two classes");
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return bad("pos_weight must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub image_width: usize,
    pub tabular_width: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            image_width: 512,
            tabular_width: 128,
            hidden: vec![256, 128],
            dropout: 0.3,
            classes: 3,
        }
    }
}

impl FusionConfig {
    pub fn fused_width(&self) -> usize {
        self.image_width + self.tabular_width
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.image_width == 0 || self.tabular_width == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(NeuralError::InvalidConfig("fusion widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.classes < 2 {
            return Err(NeuralError::InvalidConfig("dropout outside [0, 1) or fewer than 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SimpleCnn,
    Mlp,
    Fusion,
}

/// Node handles that locate the interesting activations inside a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    /// Feed names in concatenation order.
    pub inputs: Vec<String>,
    pub logits: NodeId,
    pub embedding: NodeId,
    pub embedding_width: usize,
    pub loss: NodeId,
    /// Output of the last conv block, for Grad-CAM.
    pub last_block: Option<NodeId>,
    pub classes: usize,
    pub single_logit: bool,
    pub trained: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub graph: Graph,
    pub meta: ModelMeta,
}

impl Model {
    pub fn num_parameters(&self) -> usize {
        self.graph.num_parameters()
    }

    /// Logits in eval mode, `[B, K]` (or `[B, 1]` for a single logit).
    pub fn logits(&self, feed: &Feed) -> Result<Tensor, NeuralError> {
        Ok(self.graph.infer(feed, &[self.meta.logits])?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            graph: self.graph.clone(),
            optimizer: None,
            metadata: serde_json::to_value(&self.meta).expect("meta serializes"),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Model, NeuralError> {
        let meta: ModelMeta = serde_json::from_value(ck.metadata)
            .map_err(|e| NeuralError::InvalidData(format!("checkpoint metadata: {e}")))?;
        if meta.logits >= ck.graph.nodes().len() || meta.embedding >= ck.graph.nodes().len() {
            return Err(NeuralError::InvalidData("checkpoint node handles out of range".into()));
        }
        Ok(Model { graph: ck.graph, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Model, NeuralError> {
        Model::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// conv3x3-relu-maxpool blocks, flatten, affine-relu (the embedding),
/// dropout, affine to class logits.
pub fn build_simple_cnn(config: &SimpleCnnConfig, seed: u64) -> Result<Model, NeuralError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let s = config.input_size;
    let input = g.input(IMAGE_INPUT, vec![config.in_channels, s, s]);
    let mut x = g.scale(input, config.input_shift, config.input_scale)?;
    let mut c_in = config.in_channels;
    for (i, &c) in config.channels.iter().enumerate() {
        x = g.conv2d(&format!("conv{}", i + 1), x, c_in, c, &mut rng)?;
        x = g.relu(x)?;
        x = g.maxpool2(x)?;
        c_in = c;
    }
    let last_block = x;
    x = g.flatten(x)?;
    x = g.affine("fc1", x, config.flatten_width(), config.hidden, &mut rng)?;
    let embedding = g.relu(x)?;
    x = g.dropout(embedding, config.dropout)?;
    let logits = g.affine("fc2", x, config.hidden, config.classes, &mut rng)?;
    let loss = g.softmax_ce(logits, TARGETS, None)?;
    Ok(Model {
        graph: g,
        meta: ModelMeta {
            kind: ModelKind::SimpleCnn,
            inputs: vec![IMAGE_INPUT.into()],
            logits,
            embedding,
            embedding_width: config.hidden,
            loss,
            last_block: Some(last_block),
            classes: config.classes,
            single_logit: false,
            trained: false,
        },
    })
}

/// affine-relu-batchnorm-dropout per hidden layer, then the output layer.
pub fn build_mlp(config: &MlpConfig, seed: u64) -> Result<Model, NeuralError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let mut x = g.input(TABULAR_INPUT, vec![config.input_width]);
    let mut width = config.input_width;
    let mut embedding = x;
    for (i, &h) in config.hidden.iter().enumerate() {
        x = g.affine(&format!("fc{}", i + 1), x, width, h, &mut rng)?;
        x = g.relu(x)?;
        embedding = g.batchnorm(&format!("bn{}", i + 1), x, h)?;
        x = g.dropout(embedding, config.dropout)?;
        width = h;
    }
    let single = config.output == MlpOutput::SingleLogit;
    let outputs = if single { 1 } else { config.classes };
    let logits = g.affine("out", x, width, outputs, &mut rng)?;
    let loss = if single {
        g.bce_logit(logits, TARGETS, config.pos_weight)?
    } else {
        g.softmax_ce(logits, TARGETS, None)?
    };
    Ok(Model {
        graph: g,
        meta: ModelMeta {
            kind: ModelKind::Mlp,
            inputs: vec![TABULAR_INPUT.into()],
            logits,
            embedding,
            embedding_width: width,
            loss,
            last_block: None,
            classes: config.classes,
            single_logit: single,
            trained: false,
        },
    })
}

/// Concatenates the image embedding then the tabular embedding and runs a
/// small affine-relu-dropout head.
pub fn build_fusion(config: &FusionConfig, seed: u64) -> Result<Model, NeuralError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let img = g.input(IMAGE_EMBEDDING_INPUT, vec![config.image_width]);
    let tab = g.input(TABULAR_EMBEDDING_INPUT, vec![config.tabular_width]);
    let mut x = g.concat(vec![img, tab])?;
    let mut width = config.fused_width();
    let mut embedding = x;
    for (i, &h) in config.hidden.iter().enumerate() {
        x = g.affine(&format!("fc{}", i + 1), x, width, h, &mut rng)?;
        embedding = g.relu(x)?;
        x = g.dropout(embedding, config.dropout)?;
        width = h;
    }
    let logits = g.affine("out", x, width, config.classes, &mut rng)?;
    let loss = g.softmax_ce(logits, TARGETS, None)?;
    Ok(Model {
        graph: g,
        meta: ModelMeta {
            kind: ModelKind::Fusion,
            inputs: vec![IMAGE_EMBEDDING_INPUT.into(), TABULAR_EMBEDDING_INPUT.into()],
            logits,
            embedding,
            embedding_width: width,
            loss,
            last_block: None,
            classes: config.classes,
            single_logit: false,
            trained: false,
        },
    })
}

/// Batch size used when evaluating large inputs piecewise.
pub const INFERENCE_BATCH: usize = 256;

/// Penultimate activations in eval mode, evaluated in fixed-size chunks.
pub fn extract_embedding(model: &Model, inputs: &Feed) -> Result<Tensor, NeuralError> {
    if !model.meta.trained {
        log::warn!("extracting embeddings from an untrained {:?} model", model.meta.kind);
    }
    eval_node_chunked(model, inputs, model.meta.embedding)
}

pub(crate) fn eval_node_chunked(model: &Model, inputs: &Feed, node: NodeId) -> Result<Tensor, NeuralError> {
    let n = batch_of(model, inputs)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + INFERENCE_BATCH).min(n)).collect();
        let feed: Feed = model
            .meta
            .inputs
            .iter()
            .map(|k| (k.clone(), inputs[k].select_rows(&idx)))
            .collect();
        parts.push(model.graph.infer(&feed, &[node])?.remove(0));
        start += INFERENCE_BATCH;
    }
    Ok(Tensor::stack_rows(&parts)?)
}

pub(crate) fn batch_of(model: &Model, inputs: &Feed) -> Result<usize, NeuralError> {
    let mut n = None;
    for k in &model.meta.inputs {
        let t = inputs
            .get(k)
            .ok_or_else(|| NeuralError::InvalidData(format!("missing input `{k}`")))?;
        if n.is_some_and(|m| m != t.batch()) {
            return Err(NeuralError::InvalidData("inputs disagree on batch size".into()));
        }
        n = Some(t.batch());
    }
    match n {
        Some(0) | None => Err(NeuralError::InvalidData("no rows".into())),
        Some(v) => Ok(v),
    }
}
