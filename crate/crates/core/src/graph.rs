//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its output
//! and whatever it needs for the backward rule. Because nodes can only refer
//! to earlier nodes, the tape is always in topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use robustbench::graph::Graph;
//! use robustbench::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let y = g.relu(x).unwrap();
//! let loss = g.reduce_sum(y).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0]);
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantization;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Resolved geometry of an NHWC x HWIO convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let bad = || {
            Error::Shape(format!(
                "conv2d: input {input:?} (NHWC) and kernel {kernel:?} (HWIO) with stride {stride} do not conform"
            ))
        };
        if input.len() != 4 || kernel.len() != 4 || stride == 0 || input[3] != kernel[2] {
            return Err(bad());
        }
        let (batch, in_h, in_w, in_c) = (input[0], input[1], input[2], input[3]);
        let (k_h, k_w, out_c) = (kernel[0], kernel[1], kernel[3]);
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + k_h).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + k_w).saturating_sub(in_w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return Err(bad());
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Patch gather: `[N*OH*OW, KH*KW*C]`, zero where the window overhangs.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let patch = self.patch_len();
        let c = self.in_c;
        let mut cols = vec![T::zero(); self.rows() * patch];
        let mut row = 0;
        for n in 0..self.batch {
            let img = &x[n * self.in_h * self.in_w * c..(n + 1) * self.in_h * self.in_w * c];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for ky in 0..self.k_h {
                        let Some(iy) = self.source(oy, ky, self.pad_top, self.in_h) else { continue };
                        for kx in 0..self.k_w {
                            let Some(ix) = self.source(ox, kx, self.pad_left, self.in_w) else {
                                continue;
                            };
                            let s = (iy * self.in_w + ix) * c;
                            let d = (ky * self.k_w + kx) * c;
                            dst[d..d + c].copy_from_slice(&img[s..s + c]);
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    /// Scatter-add of patch gradients back onto the input.
    fn col2im<T: Real>(&self, dcols: &[T]) -> Vec<T> {
        let patch = self.patch_len();
        let c = self.in_c;
        let mut dx = vec![T::zero(); self.batch * self.in_h * self.in_w * c];
        let mut row = 0;
        for n in 0..self.batch {
            let base = n * self.in_h * self.in_w * c;
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let src = &dcols[row * patch..(row + 1) * patch];
                    for ky in 0..self.k_h {
                        let Some(iy) = self.source(oy, ky, self.pad_top, self.in_h) else { continue };
                        for kx in 0..self.k_w {
                            let Some(ix) = self.source(ox, kx, self.pad_left, self.in_w) else {
                                continue;
                            };
                            let d = base + (iy * self.in_w + ix) * c;
                            let s = (ky * self.k_w + kx) * c;
                            for ch in 0..c {
                                dx[d + ch] = dx[d + ch] + src[s + ch];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        dx
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add,
    /// Second operand's shape is a suffix of the first's; it is broadcast over the leading axes.
    AddBroadcast,
    Sub,
    Mul,
    Scale(T),
    MatMul,
    Conv2d { geom: ConvGeometry, cols: Vec<T> },
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    SigmoidCrossEntropy,
    SoftmaxCrossEntropy { probs: Vec<T>, lse: Vec<T> },
    ReduceMean,
    ReduceSum,
    Sign,
    Clip { lo: T, hi: T },
    BatchNorm { normalized: Vec<T>, inv_std: Vec<T>, train: bool, batch_mean: Vec<T>, batch_var: Vec<T> },
    Reshape,
    Standardize { scale: Vec<T>, clamped: Vec<bool> },
    QuantizeWeights,
    QuantizeActivations { bits: u32 },
    QuantizeGradients { bits: u32, rng: Rng },
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Tape of primitive applications.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&id| self.get(id))
    }

    /// Parameter name to gradient. Parameters the loss does not depend on get zeros.
    pub fn into_named(mut self, shapes: impl Fn(NodeId) -> Vec<usize>) -> BTreeMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(name, id)| {
                let g = self.take(id).unwrap_or_else(|| Tensor::zeros(&shapes(id)));
                (name, g)
            })
            .collect()
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn last_axis<T: Real>(op: &str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&c) if t.rank() >= 1 => Ok((t.len() / c, c)),
        _ => Err(Error::Shape(format!("{op}: needs rank >= 1, got {:?}", t.shape()))),
    }
}

fn softplus_neg_abs<T: Real>(z: T) -> T {
    // log(1 + exp(-|z|))
    (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of a `[rows, cols]` buffer; returns (probs, log-sum-exp per row).
fn softmax_rows<T: Real>(z: &[T], rows: usize, cols: usize) -> (Vec<T>, Vec<T>) {
    let mut probs = vec![T::zero(); z.len()];
    let mut lse = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (p, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *p = (v - max).exp();
            sum = sum + *p;
        }
        for p in &mut probs[r * cols..(r + 1) * cols] {
            *p = *p / sum;
        }
        lse[r] = max + sum.ln();
    }
    (probs, lse)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node, in tape order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (e.g. an image being attacked).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient (labels, fixed statistics).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let id = self.leaf(value, true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Batch mean and (biased) variance computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { train: true, batch_mean, batch_var, .. } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let v = va.zip_map(vb, |x, y| x + y)?;
            return Ok(self.push(Op::Add, vec![a, b], v));
        }
        if vb.rank() < va.rank() && va.shape().ends_with(vb.shape()) {
            let inner = vb.len();
            let mut data = va.data().to_vec();
            for chunk in data.chunks_mut(inner) {
                for (d, &bv) in chunk.iter_mut().zip(vb.data()) {
                    *d = *d + bv;
                }
            }
            let v = Tensor::new(va.shape(), data)?;
            return Ok(self.push(Op::AddBroadcast, vec![a, b], v));
        }
        Err(Error::Shape(format!("add: shapes {:?} and {:?} do not broadcast", va.shape(), vb.shape())))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("subtract", va, vb)?;
        let v = va.zip_map(vb, |x, y| x - y)?;
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("multiply", va, vb)?;
        let v = va.zip_map(vb, |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let c = T::from_f64(c);
        let v = self.value(a).map(|x| x * c);
        Ok(self.push(Op::Scale(c), vec![a], v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a, b], v))
    }

    /// NHWC input, HWIO kernel.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(kernel).shape(), stride, padding)?;
        let cols = geom.im2col(self.value(x).data());
        let (m, k, n) = (geom.rows(), geom.patch_len(), geom.out_c);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &cols, false, self.value(kernel).data(), false, T::zero(), &mut out);
        let v = Tensor::new(&geom.output_shape(), out)?;
        Ok(self.push(Op::Conv2d { geom, cols }, vec![x, kernel], v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        Ok(self.push(Op::Relu, vec![a], v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        Ok(self.push(Op::Sigmoid, vec![a], v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.tanh());
        Ok(self.push(Op::Tanh, vec![a], v))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = last_axis("softmax", va)?;
        let (probs, _) = softmax_rows(va.data(), rows, cols);
        let v = Tensor::new(va.shape(), probs)?;
        Ok(self.push(Op::Softmax, vec![a], v))
    }

    /// Elementwise `max(z, 0) - z*y + log(1 + exp(-|z|))`.
    pub fn sigmoid_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        let (z, y) = (self.value(logits), self.value(labels));
        same_shape("sigmoid_cross_entropy", z, y)?;
        let v = z.zip_map(y, |z, y| z.max(T::zero()) - z * y + softplus_neg_abs(z))?;
        Ok(self.push(Op::SigmoidCrossEntropy, vec![logits, labels], v))
    }

    /// Per-row `-sum_c t_c * log softmax(z)_c` for `[rows, classes]` logits; output `[rows]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (z, t) = (self.value(logits), self.value(targets));
        same_shape("softmax_cross_entropy", z, t)?;
        if z.rank() != 2 {
            return Err(Error::Shape(format!("softmax_cross_entropy: logits must be [rows, classes], got {:?}", z.shape())));
        }
        let (rows, cols) = (z.shape()[0], z.shape()[1]);
        let (probs, lse) = softmax_rows(z.data(), rows, cols);
        let mut loss = vec![T::zero(); rows];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                loss[r] = loss[r] - t.data()[i] * (z.data()[i] - lse[r]);
            }
        }
        let v = Tensor::new(&[rows], loss)?;
        Ok(self.push(Op::SoftmaxCrossEntropy { probs, lse }, vec![logits, targets], v))
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).mean());
        Ok(self.push(Op::ReduceMean, vec![a], v))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.push(Op::ReduceSum, vec![a], v))
    }

    /// `sign` with `sign(0) = 0`; its gradient is zero everywhere.
    pub fn sign(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sign);
        Ok(self.push(Op::Sign, vec![a], v))
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clip: lo {lo} > hi {hi}")));
        }
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        Ok(self.push(Op::Clip { lo, hi }, vec![a], v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape).map_err(|_| {
            Error::Shape(format!("reshape: {:?} cannot become {shape:?}", self.value(a).shape()))
        })?;
        Ok(self.push(Op::Reshape, vec![a], v))
    }

    /// Batch norm over every axis but the last (channels).
    ///
    /// Train mode normalizes with the batch statistics (see [`Graph::batch_stats`]);
    /// inference mode uses `running = (mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[T], &[T])>,
    ) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, c) = last_axis("batch_norm", vx)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm: {name} shape {:?} does not match input {:?}",
                    self.value(id).shape(),
                    vx.shape()
                )));
            }
        }
        let eps = T::from_f64(BN_EPS);
        let train = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::Shape(format!("batch_norm: running stats length != {c}")));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let n = T::from_f64(rows as f64);
                let mut mean = vec![T::zero(); c];
                for row in vx.data().chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in vx.data().chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / n);
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for (i, &v) in vx.data().iter().enumerate() {
            let ch = i % c;
            normalized[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * normalized[i] + b[ch];
        }
        let v = Tensor::new(vx.shape(), out)?;
        let op = Op::BatchNorm {
            normalized,
            inv_std,
            train,
            batch_mean: if train { mean } else { Vec::new() },
            batch_var: if train { var } else { Vec::new() },
        };
        Ok(self.push(op, vec![x, gamma, beta], v))
    }

    /// Per-example `(x - mean) / max(std, 1/sqrt(count))` over all non-leading axes.
    pub fn standardize(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() < 2 {
            return Err(Error::Shape(format!("standardize: needs a leading batch axis, got {:?}", va.shape())));
        }
        let rows = va.shape()[0];
        let per = va.len() / rows;
        let floor = T::one() / T::from_f64(per as f64).sqrt();
        let mut out = vec![T::zero(); va.len()];
        let mut scale = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        for (r, chunk) in va.data().chunks(per).enumerate() {
            let (mean, std) = mean_std(chunk);
            let s = std.max(floor);
            for (o, &v) in out[r * per..(r + 1) * per].iter_mut().zip(chunk) {
                *o = (v - mean) / s;
            }
            scale.push(s);
            clamped.push(std <= floor);
        }
        let v = Tensor::new(va.shape(), out)?;
        Ok(self.push(Op::Standardize { scale, clamped }, vec![a], v))
    }

    /// Weight quantizer with an identity (straight-through) backward rule.
    pub fn quantize_weights(&mut self, a: NodeId, bits: u32) -> Result<NodeId> {
        let v = quantization::quantize_weights(self.value(a), bits)?;
        Ok(self.push(Op::QuantizeWeights, vec![a], v))
    }

    /// Activation quantizer; backward passes the gradient only inside `[0, 1]`
    /// (unless `bits == 32`, which is an exact passthrough both ways).
    pub fn quantize_activations(&mut self, a: NodeId, bits: u32) -> Result<NodeId> {
        let v = quantization::quantize_activations(self.value(a), bits)?;
        Ok(self.push(Op::QuantizeActivations { bits }, vec![a], v))
    }

    /// Identity forward; quantizes the incoming gradient on the way back.
    pub fn quantize_gradients(&mut self, a: NodeId, bits: u32, rng: Rng) -> Result<NodeId> {
        quantization::check_bits(bits)?;
        let v = self.value(a).clone();
        Ok(self.push(Op::QuantizeGradients { bits, rng }, vec![a], v))
    }

    /// Reverse sweep from a scalar `loss`, seeded with 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward: loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let input_grads = self.node_backward(idx, &gout)?;
            let inputs = self.nodes[idx].inputs.clone();
            for (input, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    /// Gradients with respect to each input of node `idx`, given the output gradient.
    fn node_backward(&mut self, idx: usize, gout: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let result = self.op_backward(&mut op, idx, gout);
        self.nodes[idx].op = op;
        result
    }

    fn op_backward(&self, op: &mut Op<T>, idx: usize, gout: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let inputs = &self.nodes[idx].inputs;
        let needs = |g: &Self, i: usize| g.nodes[inputs[i].0].requires_grad;
        let out = &self.nodes[idx].value;
        let gd = gout.data();
        let grads = match op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(gout.clone()), Some(gout.clone())],
            Op::AddBroadcast => {
                let bshape = self.nodes[inputs[1].0].value.shape().to_vec();
                let inner = bshape.iter().product::<usize>();
                let mut gb = vec![T::zero(); inner];
                for chunk in gd.chunks(inner) {
                    for (s, &v) in gb.iter_mut().zip(chunk) {
                        *s = *s + v;
                    }
                }
                vec![Some(gout.clone()), Some(Tensor::new(&bshape, gb)?)]
            }
            Op::Sub => vec![Some(gout.clone()), Some(gout.map(|v| -v))],
            Op::Mul => {
                let a = &self.nodes[inputs[0].0].value;
                let b = &self.nodes[inputs[1].0].value;
                vec![Some(gout.zip_map(b, |g, b| g * b)?), Some(gout.zip_map(a, |g, a| g * a)?)]
            }
            Op::Scale(c) => {
                let c = *c;
                vec![Some(gout.map(|g| g * c))]
            }
            Op::MatMul => {
                let a = &self.nodes[inputs[0].0].value;
                let b = &self.nodes[inputs[1].0].value;
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = if needs(self, 0) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, false, b.data(), true, T::zero(), &mut ga);
                    Some(Tensor::new(a.shape(), ga)?)
                } else {
                    None
                };
                let gb = if needs(self, 1) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), a.data(), true, gd, false, T::zero(), &mut gb);
                    Some(Tensor::new(b.shape(), gb)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Conv2d { geom, cols } => {
                let geom = *geom;
                let kernel = &self.nodes[inputs[1].0].value;
                let (m, k, n) = (geom.rows(), geom.patch_len(), geom.out_c);
                let gx = if needs(self, 0) {
                    let mut dcols = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, false, kernel.data(), true, T::zero(), &mut dcols);
                    let x_shape = [geom.batch, geom.in_h, geom.in_w, geom.in_c];
                    Some(Tensor::new(&x_shape, geom.col2im(&dcols))?)
                } else {
                    None
                };
                let gk = if needs(self, 1) {
                    let mut dk = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), cols, true, gd, false, T::zero(), &mut dk);
                    Some(Tensor::new(kernel.shape(), dk)?)
                } else {
                    None
                };
                vec![gx, gk]
            }
            Op::Relu => {
                let a = &self.nodes[inputs[0].0].value;
                vec![Some(gout.zip_map(a, |g, x| if x > T::zero() { g } else { T::zero() })?)]
            }
            Op::Sigmoid => vec![Some(gout.zip_map(out, |g, s| g * s * (T::one() - s))?)],
            Op::Tanh => vec![Some(gout.zip_map(out, |g, t| g * (T::one() - t * t))?)],
            Op::Softmax => {
                let (rows, cols) = last_axis("softmax", out)?;
                let p = out.data();
                let mut gx = vec![T::zero(); p.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot = p[s.clone()].iter().zip(&gd[s.clone()]).fold(T::zero(), |acc, (&p, &g)| acc + p * g);
                    for i in s {
                        gx[i] = p[i] * (gd[i] - dot);
                    }
                }
                vec![Some(Tensor::new(out.shape(), gx)?)]
            }
            Op::SigmoidCrossEntropy => {
                let z = &self.nodes[inputs[0].0].value;
                let y = &self.nodes[inputs[1].0].value;
                // sigmoid(z) - y written so a saturated logit keeps a tiny, nonzero gradient.
                let gz: Vec<T> = gd
                    .iter()
                    .zip(z.data())
                    .zip(y.data())
                    .map(|((&g, &z), &y)| g * ((T::one() - y) * sigmoid(z) - y * sigmoid(-z)))
                    .collect();
                let gy = if needs(self, 1) { Some(gout.zip_map(z, |g, z| -g * z)?) } else { None };
                vec![Some(Tensor::new(z.shape(), gz)?), gy]
            }
            Op::SoftmaxCrossEntropy { probs, lse } => {
                let z = &self.nodes[inputs[0].0].value;
                let t = &self.nodes[inputs[1].0].value;
                let (rows, cols) = (z.shape()[0], z.shape()[1]);
                let mut gz = vec![T::zero(); z.len()];
                let mut gt = vec![T::zero(); z.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let tsum = t.data()[s.clone()].iter().fold(T::zero(), |a, &v| a + v);
                    for i in s {
                        gz[i] = gd[r] * (probs[i] * tsum - t.data()[i]);
                        gt[i] = -gd[r] * (z.data()[i] - lse[r]);
                    }
                }
                let gt = if needs(self, 1) { Some(Tensor::new(t.shape(), gt)?) } else { None };
                vec![Some(Tensor::new(z.shape(), gz)?), gt]
            }
            Op::ReduceMean => {
                let a = &self.nodes[inputs[0].0].value;
                let g = gd[0] / T::from_f64(a.len() as f64);
                vec![Some(Tensor::full(a.shape(), g))]
            }
            Op::ReduceSum => {
                let a = &self.nodes[inputs[0].0].value;
                vec![Some(Tensor::full(a.shape(), gd[0]))]
            }
            Op::Sign => {
                let a = &self.nodes[inputs[0].0].value;
                vec![Some(Tensor::zeros(a.shape()))]
            }
            Op::Clip { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let a = &self.nodes[inputs[0].0].value;
                vec![Some(gout.zip_map(a, |g, x| if x >= lo && x <= hi { g } else { T::zero() })?)]
            }
            Op::Reshape => {
                let a = &self.nodes[inputs[0].0].value;
                vec![Some(gout.reshape(a.shape())?)]
            }
            Op::BatchNorm { normalized, inv_std, train, .. } => {
                let gamma = self.nodes[inputs[1].0].value.data();
                let c = gamma.len();
                let rows = normalized.len() / c;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &g) in gd.iter().enumerate() {
                    dgamma[i % c] = dgamma[i % c] + g * normalized[i];
                    dbeta[i % c] = dbeta[i % c] + g;
                }
                let mut dx = vec![T::zero(); gd.len()];
                if *train {
                    // dx = inv_std / M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), dxhat = g*gamma
                    let m = T::from_f64(rows as f64);
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = i % c;
                        let dxhat = gd[i] * gamma[ch];
                        let sum_dxhat = dbeta[ch] * gamma[ch];
                        let sum_dxhat_xhat = dgamma[ch] * gamma[ch];
                        *d = inv_std[ch] / m * (m * dxhat - sum_dxhat - normalized[i] * sum_dxhat_xhat);
                    }
                } else {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = i % c;
                        *d = gd[i] * gamma[ch] * inv_std[ch];
                    }
                }
                vec![Some(Tensor::new(gout.shape(), dx)?), Some(Tensor::from_vec(dgamma)), Some(Tensor::from_vec(dbeta))]
            }
            Op::Standardize { scale, clamped } => {
                let rows = scale.len();
                let per = gd.len() / rows;
                let n = T::from_f64(per as f64);
                let y = out.data();
                let mut dx = vec![T::zero(); gd.len()];
                for r in 0..rows {
                    let s = r * per..(r + 1) * per;
                    let gsum = gd[s.clone()].iter().fold(T::zero(), |a, &v| a + v);
                    let gy = gd[s.clone()].iter().zip(&y[s.clone()]).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for i in s {
                        let centered = gd[i] - gsum / n;
                        dx[i] = if clamped[r] {
                            centered / scale[r]
                        } else {
                            (centered - y[i] * gy / n) / scale[r]
                        };
                    }
                }
                vec![Some(Tensor::new(gout.shape(), dx)?)]
            }
            Op::QuantizeWeights => vec![Some(gout.clone())],
            Op::QuantizeActivations { bits } => {
                if *bits == 32 {
                    vec![Some(gout.clone())]
                } else {
                    let a = &self.nodes[inputs[0].0].value;
                    let (zero, one) = (T::zero(), T::one());
                    vec![Some(gout.zip_map(a, |g, x| if x >= zero && x <= one { g } else { zero })?)]
                }
            }
            Op::QuantizeGradients { bits, rng } => {
                vec![Some(quantization::quantize_gradients(gout, *bits, rng)?)]
            }
        };
        Ok(grads)
    }
}

/// `sign(x)` with `sign(0) = 0`.
pub fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean and population standard deviation.
pub(crate) fn mean_std<T: Real>(values: &[T]) -> (T, T) {
    // Accumulate in f64 so a constant image has a mean equal to its value.
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let m = T::from_f64(mean);
    let var = values.iter().map(|&v| (v - m).as_f64().powi(2)).sum::<f64>() / n;
    (m, T::from_f64(var.sqrt()))
}
