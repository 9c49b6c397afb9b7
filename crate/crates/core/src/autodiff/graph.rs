use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels::{col2im3, gemm, im2col3, maxpool2, MatRef};
use super::{GraphError, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

/// Named input tensors for one forward pass. Loss nodes read integer class
/// targets from the feed as well.
pub type Feed = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks are derived from `seed`; batchnorm uses batch statistics.
    Train { seed: u64 },
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    Input {
        name: String,
        sample_shape: Vec<usize>,
    },
    Conv2d {
        weight: ParamId,
        bias: ParamId,
        padding: usize,
        stride: usize,
    },
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Relu,
    Affine {
        weight: ParamId,
        bias: ParamId,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Concat,
    /// `(x - shift) * scale`, elementwise.
    Scale {
        shift: f64,
        scale: f64,
    },
    SoftmaxCe {
        targets: String,
        class_weights: Option<Vec<f64>>,
    },
    BceLogit {
        targets: String,
        pos_weight: f64,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 => "maxpool2",
            Op::Relu => "relu",
            Op::Affine { .. } => "affine",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dropout { .. } => "dropout",
            Op::Flatten => "flatten",
            Op::Concat => "concat",
            Op::Scale { .. } => "scale",
            Op::SoftmaxCe { .. } => "softmax-ce",
            Op::BceLogit { .. } => "bce-logit",
        }
    }

    pub fn is_loss(&self) -> bool {
        matches!(self, Op::SoftmaxCe { .. } | Op::BceLogit { .. })
    }

    fn params(&self) -> Vec<ParamId> {
        match self {
            Op::Conv2d { weight, bias, .. } | Op::Affine { weight, bias } => vec![*weight, *bias],
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![*gamma, *beta, *running_mean, *running_var],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Running statistics are stored as non-trainable parameters.
    pub trainable: bool,
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Argmax(Vec<u32>),
    Mask(Vec<f64>),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var_unbiased: Vec<f64>,
    },
    Probs {
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Tape {
    mode: Mode,
    values: Vec<Tensor>,
    aux: Vec<Aux>,
}

/// Layered differentiable network: nodes in topological order plus their parameters.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Param>,
    #[serde(skip)]
    tape: Option<Tape>,
}

fn he_normal<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn mix_seed(seed: u64, node: NodeId) -> u64 {
    // splitmix64 finaliser over (seed, node)
    let mut z = seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mismatch(node: NodeId, op: &Op, detail: impl Into<String>) -> GraphError {
    GraphError::ShapeMismatch {
        node,
        op: op.kind(),
        detail: detail.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn from_parts(nodes: Vec<Node>, params: Vec<Param>) -> Result<Self, GraphError> {
        let mut g = Graph::new();
        g.params = params;
        for node in nodes {
            g.push(node.op, node.inputs)?;
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Count of trainable scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            trainable,
        });
        self.params.len() - 1
    }

    /// Appends a node after checking its wiring and attributes.
    pub fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, GraphError> {
        let id = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(GraphError::InvalidGraph(format!(
                "node {id} reads node {bad}, which does not precede it"
            )));
        }
        if let Some(&bad) = op.params().iter().find(|&&p| p >= self.params.len()) {
            return Err(GraphError::InvalidGraph(format!(
                "node {id} references unknown parameter {bad}"
            )));
        }
        let arity_ok = match &op {
            Op::Input { .. } => inputs.is_empty(),
            Op::Concat => inputs.len() >= 2,
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(GraphError::InvalidGraph(format!(
                "node {id} ({}) has {} inputs",
                op.kind(),
                inputs.len()
            )));
        }
        match &op {
            Op::Conv2d {
                weight,
                padding,
                stride,
                ..
            } => {
                let ws = self.params[*weight].tensor.shape();
                if *padding != 1 || *stride != 1 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
                    return Err(GraphError::InvalidGraph(format!(
                        "node {id}: only 3x3 kernels with padding 1 and stride 1 are supported"
                    )));
                }
            }
            Op::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                return Err(GraphError::InvalidGraph(format!(
                    "node {id}: dropout rate {rate} outside [0, 1)"
                )));
            }
            Op::Scale { shift, scale } if !(shift.is_finite() && scale.is_finite() && *scale != 0.0) => {
                return Err(GraphError::InvalidGraph(format!(
                    "node {id}: scale needs a finite shift and a finite nonzero factor, got {shift} / {scale}"
                )));
            }
            Op::BatchNorm { eps, momentum, .. }
                if *eps <= 0.0 || !(0.0..=1.0).contains(momentum) =>
            {
                return Err(GraphError::InvalidGraph(format!(
                    "node {id}: batchnorm eps {eps} / momentum {momentum} invalid"
                )));
            }
            Op::SoftmaxCe {
                class_weights: Some(w),
                ..
            } if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) => {
                return Err(GraphError::InvalidGraph(format!(
                    "node {id}: class weights must be positive"
                )));
            }
            Op::BceLogit { pos_weight, .. } if !(*pos_weight > 0.0 && pos_weight.is_finite()) => {
                return Err(GraphError::InvalidGraph(format!(
                    "node {id}: positive weight must be positive"
                )));
            }
            _ => {}
        }
        self.nodes.push(Node { op, inputs });
        self.tape = None;
        Ok(id)
    }

    pub fn input(&mut self, name: &str, sample_shape: Vec<usize>) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_string(),
                sample_shape,
            },
            vec![],
        )
        .expect("input node is always valid")
    }

    /// 3x3, padding-1 convolution with He-normal weights and zero bias.
    pub fn conv2d<R: Rng>(
        &mut self,
        name: &str,
        x: NodeId,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<NodeId, GraphError> {
        let fan_in = in_channels * 9;
        let w = Tensor::new(
            vec![out_channels, in_channels, 3, 3],
            he_normal(rng, out_channels * fan_in, fan_in),
        )?;
        let weight = self.add_param(format!("{name}.weight"), w, true);
        let bias = self.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_channels]), true);
        self.push(
            Op::Conv2d {
                weight,
                bias,
                padding: 1,
                stride: 1,
            },
            vec![x],
        )
    }

    /// Fully connected layer `x * W + b`, `W` of shape `[inputs, outputs]`.
    pub fn affine<R: Rng>(
        &mut self,
        name: &str,
        x: NodeId,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<NodeId, GraphError> {
        let w = Tensor::new(vec![inputs, outputs], he_normal(rng, inputs * outputs, inputs))?;
        let weight = self.add_param(format!("{name}.weight"), w, true);
        let bias = self.add_param(format!("{name}.bias"), Tensor::zeros(vec![outputs]), true);
        self.push(Op::Affine { weight, bias }, vec![x])
    }

    pub fn batchnorm(&mut self, name: &str, x: NodeId, features: usize) -> Result<NodeId, GraphError> {
        let gamma = self.add_param(format!("{name}.gamma"), Tensor::filled(vec![features], 1.0), true);
        let beta = self.add_param(format!("{name}.beta"), Tensor::zeros(vec![features]), true);
        let running_mean =
            self.add_param(format!("{name}.running_mean"), Tensor::zeros(vec![features]), false);
        let running_var = self.add_param(
            format!("{name}.running_var"),
            Tensor::filled(vec![features], 1.0),
            false,
        );
        self.push(
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps: 1e-5,
                momentum: 0.1,
            },
            vec![x],
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Relu, vec![x])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MaxPool2, vec![x])
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Dropout { rate }, vec![x])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Flatten, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, shift: f64, scale: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Scale { shift, scale }, vec![x])
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId, GraphError> {
        self.push(Op::Concat, parts)
    }

    pub fn softmax_ce(
        &mut self,
        logits: NodeId,
        targets: &str,
        class_weights: Option<Vec<f64>>,
    ) -> Result<NodeId, GraphError> {
        self.push(
            Op::SoftmaxCe {
                targets: targets.to_string(),
                class_weights,
            },
            vec![logits],
        )
    }

    pub fn bce_logit(&mut self, logits: NodeId, targets: &str, pos_weight: f64) -> Result<NodeId, GraphError> {
        self.push(
            Op::BceLogit {
                targets: targets.to_string(),
                pos_weight,
            },
            vec![logits],
        )
    }

    /// The single loss node of a training graph.
    pub fn loss_node(&self) -> Result<NodeId, GraphError> {
        let losses: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.is_loss())
            .collect();
        match losses.as_slice() {
            [one] => Ok(*one),
            _ => Err(GraphError::InvalidGraph(format!(
                "training graph needs exactly one loss node, found {}",
                losses.len()
            ))),
        }
    }

    /// Replaces the class weights of the softmax cross-entropy loss node.
    pub fn set_class_weights(&mut self, weights: Option<Vec<f64>>) -> Result<(), GraphError> {
        let loss = self.loss_node()?;
        if let Some(w) = &weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(GraphError::InvalidGraph("class weights must be positive".into()));
            }
        }
        match &mut self.nodes[loss].op {
            Op::SoftmaxCe { class_weights, .. } => {
                *class_weights = weights;
                Ok(())
            }
            _ => Err(GraphError::NotALoss(loss)),
        }
    }

    /// Runs every node and keeps the tape for a later backward pass. Train mode
    /// also folds batch statistics into the batchnorm running estimates.
    pub fn forward(&mut self, feed: &Feed, mode: Mode) -> Result<(), GraphError> {
        self.tape = None;
        let tape = self.run(feed, mode, self.nodes.len().saturating_sub(1))?;
        if matches!(mode, Mode::Train { .. }) {
            for (i, node) in self.nodes.iter().enumerate() {
                if let (
                    Op::BatchNorm {
                        running_mean,
                        running_var,
                        momentum,
                        ..
                    },
                    Aux::Norm {
                        batch_mean,
                        batch_var_unbiased,
                        ..
                    },
                ) = (&node.op, &tape.aux[i])
                {
                    let m = *momentum;
                    for (r, b) in self.params[*running_mean]
                        .tensor
                        .data_mut()
                        .iter_mut()
                        .zip(batch_mean)
                    {
                        *r = (1.0 - m) * *r + m * b;
                    }
                    for (r, b) in self.params[*running_var]
                        .tensor
                        .data_mut()
                        .iter_mut()
                        .zip(batch_var_unbiased)
                    {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
            }
        }
        self.tape = Some(tape);
        Ok(())
    }

    /// Activation of `node` from the last forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.tape.as_ref().and_then(|t| t.values.get(node))
    }

    /// Eval-mode evaluation that leaves the graph untouched; safe to call from
    /// several threads on a shared graph.
    pub fn infer(&self, feed: &Feed, outputs: &[NodeId]) -> Result<Vec<Tensor>, GraphError> {
        let upto = outputs.iter().copied().max().unwrap_or(0);
        if upto >= self.nodes.len() {
            return Err(GraphError::InvalidGraph(format!("no node {upto}")));
        }
        let mut tape = self.run(feed, Mode::Eval, upto)?;
        Ok(outputs
            .iter()
            .map(|&o| std::mem::replace(&mut tape.values[o], Tensor::zeros(vec![1])))
            .collect())
    }

    fn run(&self, feed: &Feed, mode: Mode, upto: NodeId) -> Result<Tape, GraphError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(upto + 1);
        let mut aux = Vec::with_capacity(upto + 1);
        let mut batch: Option<usize> = None;
        for (id, node) in self.nodes[..=upto].iter().enumerate() {
            let (value, a) = self.eval_node(id, node, &values, feed, mode, &mut batch)?;
            values.push(value);
            aux.push(a);
        }
        Ok(Tape { mode, values, aux })
    }

    fn eval_node(
        &self,
        id: NodeId,
        node: &Node,
        values: &[Tensor],
        feed: &Feed,
        mode: Mode,
        batch: &mut Option<usize>,
    ) -> Result<(Tensor, Aux), GraphError> {
        let op = &node.op;
        let x = node.inputs.first().map(|&i| &values[i]);
        match op {
            Op::Input { name, sample_shape } => {
                let t = feed
                    .get(name)
                    .ok_or_else(|| GraphError::MissingInput(name.clone()))?;
                if t.shape().len() != sample_shape.len() + 1 || &t.shape()[1..] != sample_shape.as_slice() {
                    return Err(mismatch(
                        id,
                        op,
                        format!("input `{name}` has shape {:?}, expected [B, {sample_shape:?}]", t.shape()),
                    ));
                }
                if let Some(b) = *batch {
                    if b != t.batch() {
                        return Err(mismatch(id, op, format!("batch {} differs from {b}", t.batch())));
                    }
                }
                *batch = Some(t.batch());
                if !t.is_finite() {
                    return Err(GraphError::NonFiniteInput(name.clone()));
                }
                Ok((t.clone(), Aux::None))
            }
            Op::Conv2d { weight, bias, .. } => {
                let x = x.unwrap();
                let s = x.shape();
                let w = &self.params[*weight].tensor;
                if s.len() != 4 {
                    return Err(mismatch(id, op, format!("expected [B, C, H, W], got {s:?}")));
                }
                let (b, c, h, wd) = (s[0], s[1], s[2], s[3]);
                let co = w.shape()[0];
                if w.shape()[1] != c {
                    return Err(mismatch(
                        id,
                        op,
                        format!("input has {c} channels but kernels expect {}", w.shape()[1]),
                    ));
                }
                let hw = h * wd;
                let bias = self.params[*bias].tensor.data();
                let mut out = vec![0.0; b * co * hw];
                let mut cols = vec![0.0; c * 9 * hw];
                let wm = MatRef::row_major(w.data(), co, c * 9);
                for n in 0..b {
                    im2col3(x.row(n), c, h, wd, &mut cols);
                    let o = &mut out[n * co * hw..(n + 1) * co * hw];
                    for (k, chunk) in o.chunks_mut(hw).enumerate() {
                        chunk.fill(bias[k]);
                    }
                    gemm(1.0, wm, MatRef::row_major(&cols, c * 9, hw), 1.0, o);
                }
                Ok((Tensor::new(vec![b, co, h, wd], out)?, Aux::None))
            }
            Op::MaxPool2 => {
                let x = x.unwrap();
                let s = x.shape();
                if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
                    return Err(mismatch(id, op, format!("needs even spatial extents, got {s:?}")));
                }
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let per = c * (h / 2) * (w / 2);
                let mut out = vec![0.0; b * per];
                let mut arg = vec![0u32; b * per];
                for n in 0..b {
                    maxpool2(
                        x.row(n),
                        c,
                        h,
                        w,
                        &mut out[n * per..(n + 1) * per],
                        &mut arg[n * per..(n + 1) * per],
                    );
                }
                Ok((Tensor::new(vec![b, c, h / 2, w / 2], out)?, Aux::Argmax(arg)))
            }
            Op::Relu => {
                let x = x.unwrap();
                let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, Aux::None))
            }
            Op::Affine { weight, bias } => {
                let x = x.unwrap();
                let w = &self.params[*weight].tensor;
                let (fin, fout) = (w.shape()[0], w.shape()[1]);
                if x.shape().len() != 2 || x.shape()[1] != fin {
                    return Err(mismatch(
                        id,
                        op,
                        format!("input {:?} does not match weight {:?}", x.shape(), w.shape()),
                    ));
                }
                let b = x.batch();
                let bias = self.params[*bias].tensor.data();
                let mut out = Vec::with_capacity(b * fout);
                for _ in 0..b {
                    out.extend_from_slice(bias);
                }
                gemm(
                    1.0,
                    MatRef::row_major(x.data(), b, fin),
                    MatRef::row_major(w.data(), fin, fout),
                    1.0,
                    &mut out,
                );
                Ok((Tensor::new(vec![b, fout], out)?, Aux::None))
            }
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                ..
            } => {
                let x = x.unwrap();
                let f = self.params[*gamma].tensor.len();
                if x.shape().len() != 2 || x.shape()[1] != f {
                    return Err(mismatch(id, op, format!("expected [B, {f}], got {:?}", x.shape())));
                }
                let b = x.batch();
                let g = self.params[*gamma].tensor.data();
                let be = self.params[*beta].tensor.data();
                let (mean, var, unbiased) = match mode {
                    Mode::Train { .. } => {
                        if b < 2 {
                            return Err(mismatch(id, op, "train-mode batchnorm needs a batch of at least 2"));
                        }
                        let mut mean = vec![0.0; f];
                        for r in 0..b {
                            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                                *m += v;
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= b as f64);
                        let mut var = vec![0.0; f];
                        for r in 0..b {
                            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                                *s += (v - m) * (v - m);
                            }
                        }
                        let unbiased: Vec<f64> = var.iter().map(|s| s / (b as f64 - 1.0)).collect();
                        var.iter_mut().for_each(|s| *s /= b as f64);
                        (mean, var, unbiased)
                    }
                    Mode::Eval => (
                        self.params[*running_mean].tensor.data().to_vec(),
                        self.params[*running_var].tensor.data().to_vec(),
                        Vec::new(),
                    ),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = vec![0.0; b * f];
                let mut out = vec![0.0; b * f];
                for r in 0..b {
                    for j in 0..f {
                        let xh = (x.data()[r * f + j] - mean[j]) * inv_std[j];
                        xhat[r * f + j] = xh;
                        out[r * f + j] = g[j] * xh + be[j];
                    }
                }
                Ok((
                    Tensor::new(vec![b, f], out)?,
                    Aux::Norm {
                        xhat,
                        inv_std,
                        batch_mean: mean,
                        batch_var_unbiased: unbiased,
                    },
                ))
            }
            Op::Dropout { rate } => {
                let x = x.unwrap();
                match mode {
                    Mode::Train { seed } if *rate > 0.0 => {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id));
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
                            .collect();
                        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                        Ok((Tensor::new(x.shape().to_vec(), out)?, Aux::Mask(mask)))
                    }
                    _ => Ok((x.clone(), Aux::None)),
                }
            }
            Op::Flatten => {
                let x = x.unwrap();
                let (b, w) = (x.batch(), x.row_len());
                Ok((x.clone().reshape(vec![b, w])?, Aux::None))
            }
            Op::Scale { shift, scale } => {
                let x = x.unwrap();
                let out = x.data().iter().map(|v| (v - shift) * scale).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, Aux::None))
            }
            Op::Concat => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                let b = parts[0].batch();
                if parts.iter().any(|p| p.shape().len() != 2 || p.batch() != b) {
                    return Err(mismatch(id, op, "concat needs rank-2 inputs with equal batch"));
                }
                let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
                let mut out = Vec::with_capacity(b * total);
                for r in 0..b {
                    for p in &parts {
                        out.extend_from_slice(p.row(r));
                    }
                }
                Ok((Tensor::new(vec![b, total], out)?, Aux::None))
            }
            Op::SoftmaxCe {
                targets,
                class_weights,
            } => {
                let x = x.unwrap();
                if x.shape().len() != 2 {
                    return Err(mismatch(id, op, format!("logits must be [B, K], got {:?}", x.shape())));
                }
                let (b, k) = (x.batch(), x.shape()[1]);
                if let Some(w) = class_weights {
                    if w.len() != k {
                        return Err(mismatch(id, op, format!("{} class weights for {k} classes", w.len())));
                    }
                }
                let t = read_targets(id, op, feed, targets, b, k)?;
                let mut probs = vec![0.0; b * k];
                let mut loss = 0.0;
                for r in 0..b {
                    let row = x.row(r);
                    let lp = log_softmax(row);
                    for j in 0..k {
                        probs[r * k + j] = lp[j].exp();
                    }
                    let w = class_weights.as_ref().map_or(1.0, |w| w[t[r]]);
                    loss -= w * lp[t[r]];
                }
                loss /= b as f64;
                Ok((Tensor::filled(vec![1], loss), Aux::Probs { probs, targets: t }))
            }
            Op::BceLogit { targets, pos_weight } => {
                let x = x.unwrap();
                if x.shape().len() != 2 || x.shape()[1] != 1 {
                    return Err(mismatch(id, op, format!("logits must be [B, 1], got {:?}", x.shape())));
                }
                let b = x.batch();
                let t = read_targets(id, op, feed, targets, b, 2)?;
                let mut probs = vec![0.0; b];
                let mut loss = 0.0;
                for r in 0..b {
                    let z = x.data()[r];
                    probs[r] = sigmoid(z);
                    loss += if t[r] == 1 {
                        pos_weight * softplus(-z)
                    } else {
                        softplus(z)
                    };
                }
                loss /= b as f64;
                Ok((Tensor::filled(vec![1], loss), Aux::Probs { probs, targets: t }))
            }
        }
    }

    /// Backpropagates from a loss node with unit seed. Parameter gradients are
    /// stored on each trainable tensor; parameters the loss does not reach get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        if loss >= self.nodes.len() || !self.nodes[loss].op.is_loss() {
            return Err(GraphError::NotALoss(loss));
        }
        self.backward_seeded(loss, Tensor::filled(vec![1], 1.0), &[])
            .map(|_| ())
    }

    /// Backpropagates `seed` (shaped like the activation of `from`) and returns
    /// the gradient arriving at each node listed in `capture`.
    pub fn backward_seeded(
        &mut self,
        from: NodeId,
        seed: Tensor,
        capture: &[NodeId],
    ) -> Result<Vec<Tensor>, GraphError> {
        let tape = self.tape.take().ok_or(GraphError::NoForward)?;
        let result = self.propagate(&tape, from, seed, capture);
        self.tape = Some(tape);
        result
    }

    fn propagate(
        &mut self,
        tape: &Tape,
        from: NodeId,
        seed: Tensor,
        capture: &[NodeId],
    ) -> Result<Vec<Tensor>, GraphError> {
        if from >= tape.values.len() {
            return Err(GraphError::NoForward);
        }
        if seed.shape() != tape.values[from].shape() {
            return Err(GraphError::InvalidShape(format!(
                "seed shape {:?} differs from node {from} activation {:?}",
                seed.shape(),
                tape.values[from].shape()
            )));
        }
        let mut needs = vec![false; from + 1];
        for (i, node) in self.nodes[..=from].iter().enumerate() {
            needs[i] = capture.contains(&i)
                || node.op.params().iter().any(|&p| self.params[p].trainable)
                || node.inputs.iter().any(|&j| needs[j]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; from + 1];
        grads[from] = Some(seed.into_data());
        let mut pgrads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let mut captured: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();

        for id in (0..=from).rev() {
            let Some(g) = grads[id].take() else { continue };
            if capture.contains(&id) {
                captured.insert(id, g.clone());
            }
            let node = &self.nodes[id];
            self.backward_node(id, node, tape, &g, &needs, &mut grads, &mut pgrads)?;
        }

        for (p, g) in self.params.iter_mut().zip(pgrads) {
            if p.trainable {
                p.tensor.set_grad(g);
            }
        }
        capture
            .iter()
            .map(|&c| {
                let shape = tape.values[c].shape().to_vec();
                let data = captured.remove(&c).unwrap_or_else(|| vec![0.0; tape.values[c].len()]);
                Tensor::new(shape, data)
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_node(
        &self,
        id: NodeId,
        node: &Node,
        tape: &Tape,
        g: &[f64],
        needs: &[bool],
        grads: &mut [Option<Vec<f64>>],
        pgrads: &mut [Vec<f64>],
    ) -> Result<(), GraphError> {
        let input = node.inputs.first().copied();
        let want_input = input.is_some_and(|i| needs[i]);
        let push = |grads: &mut [Option<Vec<f64>>], i: NodeId, d: Vec<f64>| match &mut grads[i] {
            Some(acc) => acc.iter_mut().zip(d).for_each(|(a, v)| *a += v),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Input { .. } => {}
            Op::Conv2d { weight, bias, .. } => {
                let i = input.unwrap();
                let x = &tape.values[i];
                let s = x.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let wt = &self.params[*weight].tensor;
                let co = wt.shape()[0];
                let hw = h * w;
                let mut cols = vec![0.0; c * 9 * hw];
                let mut dcols = vec![0.0; c * 9 * hw];
                let mut dx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
                let wm = MatRef::row_major(wt.data(), co, c * 9);
                let (dw, db) = two_mut(pgrads, *weight, *bias);
                for n in 0..b {
                    let go = &g[n * co * hw..(n + 1) * co * hw];
                    im2col3(x.row(n), c, h, w, &mut cols);
                    let gm = MatRef::row_major(go, co, hw);
                    gemm(1.0, gm, MatRef::row_major(&cols, c * 9, hw).t(), 1.0, dw);
                    for (k, chunk) in go.chunks(hw).enumerate() {
                        db[k] += chunk.iter().sum::<f64>();
                    }
                    if want_input {
                        gemm(1.0, wm.t(), gm, 0.0, &mut dcols);
                        col2im3(&dcols, c, h, w, &mut dx[n * c * hw..(n + 1) * c * hw]);
                    }
                }
                if want_input {
                    push(grads, i, dx);
                }
            }
            Op::MaxPool2 => {
                if want_input {
                    let i = input.unwrap();
                    let Aux::Argmax(arg) = &tape.aux[id] else { unreachable!() };
                    let x = &tape.values[i];
                    let (per_in, per_out) = (x.row_len(), tape.values[id].row_len());
                    let mut dx = vec![0.0; x.len()];
                    for (o, (&a, &gv)) in arg.iter().zip(g).enumerate() {
                        let n = o / per_out;
                        dx[n * per_in + a as usize] += gv;
                    }
                    push(grads, i, dx);
                }
            }
            Op::Relu => {
                if want_input {
                    let i = input.unwrap();
                    let dx = tape.values[i]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    push(grads, i, dx);
                }
            }
            Op::Affine { weight, bias } => {
                let i = input.unwrap();
                let x = &tape.values[i];
                let wt = &self.params[*weight].tensor;
                let (fin, fout) = (wt.shape()[0], wt.shape()[1]);
                let b = x.batch();
                let gm = MatRef::row_major(g, b, fout);
                let (dw, db) = two_mut(pgrads, *weight, *bias);
                gemm(1.0, MatRef::row_major(x.data(), b, fin).t(), gm, 1.0, dw);
                for r in 0..b {
                    for (d, gv) in db.iter_mut().zip(&g[r * fout..(r + 1) * fout]) {
                        *d += gv;
                    }
                }
                if want_input {
                    let mut dx = vec![0.0; b * fin];
                    gemm(1.0, gm, MatRef::row_major(wt.data(), fin, fout).t(), 0.0, &mut dx);
                    push(grads, i, dx);
                }
            }
            Op::BatchNorm { gamma, beta, .. } => {
                let Aux::Norm { xhat, inv_std, .. } = &tape.aux[id] else { unreachable!() };
                let f = inv_std.len();
                let b = g.len() / f;
                let gm = self.params[*gamma].tensor.data().to_vec();
                let (dgamma, dbeta) = two_mut(pgrads, *gamma, *beta);
                for r in 0..b {
                    for j in 0..f {
                        dgamma[j] += g[r * f + j] * xhat[r * f + j];
                        dbeta[j] += g[r * f + j];
                    }
                }
                if want_input {
                    let i = input.unwrap();
                    let mut dx = vec![0.0; b * f];
                    match tape.mode {
                        Mode::Train { .. } => {
                            let bn = b as f64;
                            for j in 0..f {
                                let mut sum = 0.0;
                                let mut sum_x = 0.0;
                                for r in 0..b {
                                    let d = g[r * f + j] * gm[j];
                                    sum += d;
                                    sum_x += d * xhat[r * f + j];
                                }
                                for r in 0..b {
                                    let d = g[r * f + j] * gm[j];
                                    dx[r * f + j] =
                                        inv_std[j] / bn * (bn * d - sum - xhat[r * f + j] * sum_x);
                                }
                            }
                        }
                        Mode::Eval => {
                            for r in 0..b {
                                for j in 0..f {
                                    dx[r * f + j] = g[r * f + j] * gm[j] * inv_std[j];
                                }
                            }
                        }
                    }
                    push(grads, i, dx);
                }
            }
            Op::Dropout { .. } => {
                if want_input {
                    let i = input.unwrap();
                    let dx = match &tape.aux[id] {
                        Aux::Mask(m) => g.iter().zip(m).map(|(a, b)| a * b).collect(),
                        _ => g.to_vec(),
                    };
                    push(grads, i, dx);
                }
            }
            Op::Flatten => {
                if want_input {
                    push(grads, input.unwrap(), g.to_vec());
                }
            }
            Op::Scale { scale, .. } => {
                if want_input {
                    push(grads, input.unwrap(), g.iter().map(|v| v * scale).collect());
                }
            }
            Op::Concat => {
                let widths: Vec<usize> = node.inputs.iter().map(|&i| tape.values[i].shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let b = g.len() / total;
                let mut offset = 0;
                for (&i, &w) in node.inputs.iter().zip(&widths) {
                    if needs[i] {
                        let mut d = Vec::with_capacity(b * w);
                        for r in 0..b {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        push(grads, i, d);
                    }
                    offset += w;
                }
            }
            Op::SoftmaxCe { class_weights, .. } => {
                if want_input {
                    let Aux::Probs { probs, targets } = &tape.aux[id] else { unreachable!() };
                    let b = targets.len();
                    let k = probs.len() / b;
                    let mut dx = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let w = class_weights.as_ref().map_or(1.0, |w| w[t]);
                        dx[r * k + t] -= 1.0;
                        for v in &mut dx[r * k..(r + 1) * k] {
                            *v *= g[0] * w / b as f64;
                        }
                    }
                    push(grads, input.unwrap(), dx);
                }
            }
            Op::BceLogit { pos_weight, .. } => {
                if want_input {
                    let Aux::Probs { probs, targets } = &tape.aux[id] else { unreachable!() };
                    let b = targets.len() as f64;
                    let dx = probs
                        .iter()
                        .zip(targets)
                        .map(|(&p, &t)| {
                            let d = if t == 1 { pos_weight * (p - 1.0) } else { p };
                            g[0] * d / b
                        })
                        .collect();
                    push(grads, input.unwrap(), dx);
                }
            }
        }
        Ok(())
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn read_targets(
    id: NodeId,
    op: &Op,
    feed: &Feed,
    name: &str,
    batch: usize,
    classes: usize,
) -> Result<Vec<usize>, GraphError> {
    let t = feed
        .get(name)
        .ok_or_else(|| GraphError::MissingInput(name.to_string()))?;
    if t.len() != batch {
        return Err(mismatch(id, op, format!("{} targets for batch {batch}", t.len())));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(GraphError::TargetOutOfRange {
                    node: id,
                    value: v,
                    classes,
                })
            }
        })
        .collect()
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Row-wise softmax of a `[B, K]` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.batch())
        .map(|r| log_softmax(logits.row(r)).into_iter().map(f64::exp).collect())
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}
