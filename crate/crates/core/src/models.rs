//! The three architectures: logistic regression, the two-hidden-layer
//! spheres MLP and the three-conv "vanilla" CNN.
//!
//! Quantization is applied per layer: a hidden layer whose weights or
//! activations are quantized gets batch norm after its linear map, and its
//! activation becomes the clipped activation quantizer instead of ReLU. By
//! default the first layer of the MLP/CNN and every readout layer keep
//! full-precision weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{average_class_image, Dataset, SEVEN, THREE};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::quantization::QuantSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f32 = 0.9;
/// Default threshold below which a kernel counts as dead.
pub const DEAD_KERNEL_TAU: f32 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    SpheresMlp,
    VanillaCnn,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logistic_regression" => Ok(ModelKind::LogisticRegression),
            "spheres_mlp" => Ok(ModelKind::SpheresMlp),
            "vanilla_cnn" => Ok(ModelKind::VanillaCnn),
            _ => Err(Error::Config(format!(
                "unknown model kind {s:?} (expected logistic_regression, spheres_mlp or vanilla_cnn)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::LogisticRegression => "logistic_regression",
            ModelKind::SpheresMlp => "spheres_mlp",
            ModelKind::VanillaCnn => "vanilla_cnn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Shape of one example (no batch axis).
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    /// CNN base filter count.
    pub filters: usize,
    /// MLP hidden width.
    pub hidden_width: usize,
    pub quant: QuantSpec,
    /// CNN only: per-image standardization as the first op.
    pub standardize_input: bool,
    pub quantize_first_layer: bool,
    pub quantize_last_layer: bool,
}

impl ModelConfig {
    pub fn logistic_regression(input_shape: &[usize]) -> Self {
        ModelConfig {
            kind: ModelKind::LogisticRegression,
            input_shape: input_shape.to_vec(),
            class_count: 2,
            filters: 0,
            hidden_width: 0,
            quant: QuantSpec::full_precision(),
            standardize_input: false,
            quantize_first_layer: true,
            quantize_last_layer: true,
        }
    }

    pub fn spheres_mlp(dim: usize, hidden_width: usize) -> Self {
        ModelConfig {
            kind: ModelKind::SpheresMlp,
            input_shape: vec![dim],
            class_count: 2,
            filters: 0,
            hidden_width,
            quant: QuantSpec::full_precision(),
            standardize_input: false,
            quantize_first_layer: false,
            quantize_last_layer: false,
        }
    }

    pub fn vanilla_cnn(input_shape: &[usize], class_count: usize, filters: usize) -> Self {
        ModelConfig {
            kind: ModelKind::VanillaCnn,
            input_shape: input_shape.to_vec(),
            class_count,
            filters,
            hidden_width: 0,
            quant: QuantSpec::full_precision(),
            standardize_input: false,
            quantize_first_layer: false,
            quantize_last_layer: false,
        }
    }

    pub fn with_quant(mut self, quant: QuantSpec) -> Self {
        self.quant = quant;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Number of output logits.
    pub fn outputs(&self) -> usize {
        match self.kind {
            ModelKind::LogisticRegression => 1,
            _ => self.class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Architecture(format!("input shape {:?} has empty extents", self.input_shape)));
        }
        match self.kind {
            ModelKind::LogisticRegression if self.class_count != 2 => {
                Err(Error::Architecture("logistic regression is a 2-class model".into()))
            }
            ModelKind::SpheresMlp if self.input_shape.len() != 1 || self.hidden_width == 0 => Err(
                Error::Architecture(format!("spheres_mlp needs a flat input and hidden width > 0, got {:?}", self.input_shape)),
            ),
            ModelKind::VanillaCnn => {
                if self.input_shape.len() != 3 || self.filters == 0 || self.class_count < 2 {
                    return Err(Error::Architecture(format!(
                        "vanilla_cnn needs an HxWxC input, filters > 0 and >= 2 classes, got {:?}",
                        self.input_shape
                    )));
                }
                self.layers().map(|_| ())
            }
            _ => Ok(()),
        }
    }

    /// Layer plan for this configuration.
    pub fn layers(&self) -> Result<Vec<Layer>> {
        let q = &self.quant;
        let act_quant = q.activation_bits < 32;
        let hidden = |name: &str, shape: LayerShape, first: bool| {
            let quantize_weights = q.weight_bits < 32 && (!first || self.quantize_first_layer);
            Layer {
                name: name.to_string(),
                shape,
                quantize_weights,
                batch_norm: quantize_weights || act_quant,
                readout: false,
            }
        };
        let readout = |name: &str, shape: LayerShape| Layer {
            name: name.to_string(),
            shape,
            quantize_weights: q.weight_bits < 32 && self.quantize_last_layer,
            batch_norm: false,
            readout: true,
        };
        match self.kind {
            ModelKind::LogisticRegression => {
                Ok(vec![readout("linear", LayerShape::Dense { inputs: self.input_len(), outputs: 1 })])
            }
            ModelKind::SpheresMlp => {
                let (d, h) = (self.input_len(), self.hidden_width);
                Ok(vec![
                    hidden("fc1", LayerShape::Dense { inputs: d, outputs: h }, true),
                    hidden("fc2", LayerShape::Dense { inputs: h, outputs: h }, false),
                    readout("fc3", LayerShape::Dense { inputs: h, outputs: self.class_count }),
                ])
            }
            ModelKind::VanillaCnn => {
                let (h, w, c) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let nf = self.filters;
                let convs = [
                    ("conv1", 8, c, nf, 2, Padding::Same),
                    ("conv2", 6, nf, 2 * nf, 1, Padding::Valid),
                    ("conv3", 5, 2 * nf, 2 * nf, 1, Padding::Valid),
                ];
                let mut spatial = (h, w);
                let mut layers = Vec::new();
                for (i, &(name, k, cin, cout, stride, padding)) in convs.iter().enumerate() {
                    spatial = conv_out(spatial, k, stride, padding).ok_or_else(|| {
                        Error::Architecture(format!("{name}: {k}x{k} kernel does not fit input {:?}", self.input_shape))
                    })?;
                    let shape = LayerShape::Conv { kernel: k, inputs: cin, outputs: cout, stride, padding };
                    layers.push(hidden(name, shape, i == 0));
                }
                let flat = spatial.0 * spatial.1 * 2 * nf;
                layers.push(readout("fc", LayerShape::Dense { inputs: flat, outputs: self.class_count }));
                Ok(layers)
            }
        }
    }
}

fn conv_out((h, w): (usize, usize), k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => Some((h.div_ceil(stride), w.div_ceil(stride))),
        Padding::Valid if h >= k && w >= k => Some(((h - k) / stride + 1, (w - k) / stride + 1)),
        Padding::Valid => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Dense { inputs: usize, outputs: usize },
    Conv { kernel: usize, inputs: usize, outputs: usize, stride: usize, padding: Padding },
}

impl LayerShape {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Dense { inputs, outputs } => vec![inputs, outputs],
            LayerShape::Conv { kernel, inputs, outputs, .. } => vec![kernel, kernel, inputs, outputs],
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            LayerShape::Dense { outputs, .. } | LayerShape::Conv { outputs, .. } => outputs,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerShape::Dense { inputs, outputs } => (inputs, outputs),
            LayerShape::Conv { kernel, inputs, outputs, .. } => (kernel * kernel * inputs, kernel * kernel * outputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub shape: LayerShape,
    pub quantize_weights: bool,
    pub batch_norm: bool,
    pub readout: bool,
}

impl Layer {
    fn key(&self, field: &str) -> String {
        format!("{}/{field}", self.name)
    }
}

/// Named tensors of a model. `params` are trainable; `buffers` hold
/// batch-norm running statistics; `masks` are {0,1} pruning masks keyed
/// like the weight they apply to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub masks: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Architecture(format!("missing parameter {name:?}")))
    }

    /// Checks every tensor the configuration needs is present with the right shape.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(cfg)?;
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Architecture(format!(
                    "parameter {name:?} has shape {:?}, the configuration needs {shape:?}",
                    t.shape()
                )));
            }
        }
        for name in self.params.keys().chain(self.buffers.keys()) {
            if !expected.contains_key(name) {
                return Err(Error::Architecture(format!("unexpected parameter {name:?}")));
            }
        }
        for (name, m) in &self.masks {
            let w = self.params.get(name).ok_or_else(|| Error::Architecture(format!("mask for unknown {name:?}")))?;
            if m.shape() != w.shape() || m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Architecture(format!("mask {name:?} must be {{0,1}} with shape {:?}", w.shape())));
            }
        }
        Ok(())
    }

    /// Re-applies the pruning masks so pruned entries are exactly zero.
    pub fn apply_masks(&mut self) {
        for (name, mask) in &self.masks {
            if let Some(w) = self.params.get_mut(name) {
                for (v, &m) in w.data_mut().iter_mut().zip(mask.data()) {
                    if m == 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    /// Installs magnitude-pruning masks on every weight matrix.
    pub fn prune_weights(&mut self, fraction: f64) -> Result<()> {
        for (name, w) in &self.params {
            if name.ends_with("/w") {
                self.masks.insert(name.clone(), crate::quantization::prune_mask(w, fraction)?);
            }
        }
        self.apply_masks();
        Ok(())
    }
}

fn expected_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for layer in cfg.layers()? {
        out.insert(layer.key("w"), layer.shape.weight_shape());
        let c = layer.shape.outputs();
        if layer.batch_norm {
            for f in ["gamma", "beta", "running_mean", "running_var"] {
                out.insert(layer.key(f), vec![c]);
            }
        } else {
            out.insert(layer.key("b"), vec![c]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum InitScheme {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Normal with the given std, redrawn beyond two standard deviations.
    TruncatedNormal { std: f64 },
    Zeros,
}

/// Fresh parameters; biases start at zero, batch-norm scale at one.
pub fn init_params(cfg: &ModelConfig, scheme: InitScheme, rng: &mut Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::default();
    for layer in cfg.layers()? {
        let shape = layer.shape.weight_shape();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match scheme {
            InitScheme::Zeros => vec![0.0; n],
            InitScheme::Glorot => {
                let (fi, fo) = layer.shape.fans();
                let limit = (6.0 / (fi + fo) as f64).sqrt();
                (0..n).map(|_| rng.uniform(-limit, limit) as f32).collect()
            }
            InitScheme::TruncatedNormal { std } => (0..n)
                .map(|_| loop {
                    let z = rng.normal();
                    if z.abs() <= 2.0 {
                        break (z * std) as f32;
                    }
                })
                .collect(),
        };
        ps.params.insert(layer.key("w"), Tensor::new(&shape, data)?);
        let c = layer.shape.outputs();
        if layer.batch_norm {
            ps.params.insert(layer.key("gamma"), Tensor::ones(&[c]));
            ps.params.insert(layer.key("beta"), Tensor::zeros(&[c]));
            ps.buffers.insert(layer.key("running_mean"), Tensor::zeros(&[c]));
            ps.buffers.insert(layer.key("running_var"), Tensor::ones(&[c]));
        } else {
            ps.params.insert(layer.key("b"), Tensor::zeros(&[c]));
        }
    }
    if cfg.quant.prune_fraction > 0.0 {
        ps.prune_weights(cfg.quant.prune_fraction)?;
    }
    Ok(ps)
}

/// Logistic-regression weights `avg(three) - avg(seven)` with zero bias.
pub fn expert_init(d: &Dataset) -> Result<ParamSet> {
    let three = average_class_image(d, THREE)?;
    let seven = average_class_image(d, SEVEN)?;
    let w = three.zip_map(&seven, |a, b| a - b)?;
    let n = w.len();
    let mut ps = ParamSet::default();
    ps.params.insert("linear/w".into(), w.into_reshaped(&[n, 1])?);
    ps.params.insert("linear/b".into(), Tensor::zeros(&[1]));
    Ok(ps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, gradient quantizers active.
    Train,
    /// Running statistics, no gradient quantization.
    Eval,
}

/// Graph nodes produced by [`build`].
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub logits: NodeId,
    /// Train-mode batch-norm nodes by layer name, for running-stat updates.
    pub batch_norms: Vec<(String, NodeId)>,
}

/// Appends the model to `g`, reading the batch from node `x`.
///
/// With `trainable` the parameters become named graph parameters (so their
/// gradients are reported); otherwise they are constants. `grad_rng` seeds
/// the gradient quantizers in train mode.
pub fn build(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParamSet,
    x: NodeId,
    mode: Mode,
    trainable: bool,
    grad_rng: Option<&mut Rng>,
) -> Result<ForwardNodes> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != cfg.input_shape.len() + 1 || xs[1..] != cfg.input_shape[..] {
        return Err(Error::Shape(format!(
            "forward: batch shape {xs:?} does not match input shape {:?}",
            cfg.input_shape
        )));
    }
    let batch = xs[0];
    let leaf = |g: &mut Graph, name: &str| -> Result<NodeId> {
        let v = params.get(name)?.clone();
        Ok(if trainable { g.param(name, v) } else { g.constant(v) })
    };
    let mut grad_rng = grad_rng;
    let mut h = x;
    if cfg.kind == ModelKind::VanillaCnn && cfg.standardize_input {
        h = g.standardize(h)?;
    }
    let mut batch_norms = Vec::new();
    for layer in cfg.layers()? {
        let mut w = leaf(g, &layer.key("w"))?;
        if layer.quantize_weights {
            w = g.quantize_weights(w, cfg.quant.weight_bits)?;
        }
        if let Some(mask) = params.masks.get(&layer.key("w")) {
            let m = g.constant(mask.clone());
            w = g.mul(w, m)?;
        }
        h = match layer.shape {
            LayerShape::Dense { inputs, .. } => {
                if g.value(h).rank() != 2 {
                    h = g.reshape(h, &[batch, inputs])?;
                }
                g.matmul(h, w)?
            }
            LayerShape::Conv { stride, padding, .. } => g.conv2d(h, w, stride, padding)?,
        };
        let quantized = layer.quantize_weights || (!layer.readout && cfg.quant.activation_bits < 32);
        if quantized && mode == Mode::Train && cfg.quant.gradient_bits < 32 {
            if let Some(rng) = grad_rng.as_deref_mut() {
                let stream = Rng::new(rng.next_u64());
                h = g.quantize_gradients(h, cfg.quant.gradient_bits, stream)?;
            }
        }
        if layer.batch_norm {
            let gamma = leaf(g, &layer.key("gamma"))?;
            let beta = leaf(g, &layer.key("beta"))?;
            match mode {
                Mode::Train => {
                    h = g.batch_norm(h, gamma, beta, None)?;
                    batch_norms.push((layer.name.clone(), h));
                }
                Mode::Eval => {
                    let mean = params.get(&layer.key("running_mean"))?.data().to_vec();
                    let var = params.get(&layer.key("running_var"))?.data().to_vec();
                    h = g.batch_norm(h, gamma, beta, Some((&mean, &var)))?;
                }
            }
        } else {
            let b = leaf(g, &layer.key("b"))?;
            h = g.add(h, b)?;
        }
        if !layer.readout {
            h = if cfg.quant.activation_bits < 32 {
                g.quantize_activations(h, cfg.quant.activation_bits)?
            } else {
                g.relu(h)?
            };
        }
    }
    Ok(ForwardNodes { logits: h, batch_norms })
}

/// Logits for a batch (no gradients, no running-stat updates).
pub fn forward(cfg: &ModelConfig, params: &ParamSet, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let nodes = build(&mut g, cfg, params, x, mode, false, None)?;
    Ok(g.value(nodes.logits).clone())
}

/// Folds the batch statistics of a train-mode pass into the running averages.
pub fn update_running_stats(params: &mut ParamSet, g: &Graph, nodes: &ForwardNodes) -> Result<()> {
    for (layer, id) in &nodes.batch_norms {
        let (mean, var) = g
            .batch_stats(*id)
            .ok_or_else(|| Error::InvalidArgument(format!("{layer}: not a train-mode batch norm")))?;
        for (key, stat) in [("running_mean", mean), ("running_var", var)] {
            let name = format!("{layer}/{key}");
            let buf = params.buffers.get_mut(&name).ok_or_else(|| Error::Architecture(format!("missing {name:?}")))?;
            for (r, &s) in buf.data_mut().iter_mut().zip(stat) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * s;
            }
        }
    }
    Ok(())
}

/// Per-example loss summed over the batch. Logistic regression uses sigmoid
/// cross-entropy on its single logit; the others softmax cross-entropy.
pub fn loss_sum(g: &mut Graph, cfg: &ModelConfig, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let per = per_example_loss(g, cfg, logits, labels)?;
    g.reduce_sum(per)
}

pub fn loss_mean(g: &mut Graph, cfg: &ModelConfig, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let per = per_example_loss(g, cfg, logits, labels)?;
    g.reduce_mean(per)
}

fn per_example_loss(g: &mut Graph, cfg: &ModelConfig, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let n = labels.len();
    if g.value(logits).shape() != [n, cfg.outputs()] {
        return Err(Error::Shape(format!(
            "loss: logits {:?} for {n} labels and {} outputs",
            g.value(logits).shape(),
            cfg.outputs()
        )));
    }
    if cfg.kind == ModelKind::LogisticRegression {
        let y = g.constant(Tensor::new(&[n, 1], labels.iter().map(|&l| l as f32).collect())?);
        g.sigmoid_cross_entropy(logits, y)
    } else {
        let k = cfg.class_count;
        let mut onehot = vec![0.0f32; n * k];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * k + l] = 1.0;
        }
        let y = g.constant(Tensor::new(&[n, k], onehot)?);
        g.softmax_cross_entropy(logits, y)
    }
}

/// Class probabilities per example (`[1 - p, p]` for logistic regression).
pub fn probabilities(cfg: &ModelConfig, logits: &Tensor) -> Vec<Vec<f32>> {
    let k = cfg.outputs();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            if cfg.kind == ModelKind::LogisticRegression {
                let z = row[0] as f64;
                let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
                vec![(1.0 - p) as f32, p as f32]
            } else {
                let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                let e: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| (v / s) as f32).collect()
            }
        })
        .collect()
}

/// Predicted class per example: logit > 0 means class 1 for logistic
/// regression, otherwise the first maximal logit.
pub fn predictions(cfg: &ModelConfig, logits: &Tensor) -> Vec<usize> {
    let k = cfg.outputs();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            if cfg.kind == ModelKind::LogisticRegression {
                usize::from(row[0] > 0.0)
            } else {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            }
        })
        .collect()
}

/// Dead-kernel statistics for one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelSparsity {
    pub layer: String,
    pub kernels: usize,
    pub dead_fraction: f64,
    /// Max |element| of each surviving kernel, descending.
    pub survivors: Vec<f32>,
}

/// A kernel (one output channel of an HWIO weight) is dead iff every element has |w| < `tau`.
pub fn kernel_sparsity_report(params: &ParamSet, tau: f32) -> Vec<KernelSparsity> {
    params
        .params
        .iter()
        .filter(|(name, w)| name.ends_with("/w") && w.rank() == 4)
        .map(|(name, w)| {
            let out = w.shape()[3];
            let mut maxes = vec![0.0f32; out];
            for (i, &v) in w.data().iter().enumerate() {
                let k = i % out;
                maxes[k] = maxes[k].max(v.abs());
            }
            let mut survivors: Vec<f32> = maxes.into_iter().filter(|&m| m >= tau).collect();
            survivors.sort_by(|a, b| b.total_cmp(a));
            KernelSparsity {
                layer: name.trim_end_matches("/w").to_string(),
                kernels: out,
                dead_fraction: (out - survivors.len()) as f64 / out as f64,
                survivors,
            }
        })
        .collect()
}
