//! FGSM, random-start PGD, constant pixel offsets and non-example gradient ascent.
//!
//! Gradient attacks differentiate the eval-mode graph: running batch-norm
//! statistics, straight-through quantizers, no gradient quantization.
//! `sign(0) = 0` everywhere, so pixels with a zero gradient are left alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sign, Graph};
use crate::models::{self, ModelConfig, Mode, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    ConstantOffset,
    NonexampleAscent,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "constant_offset" => Ok(AttackKind::ConstantOffset),
            "nonexample_ascent" => Ok(AttackKind::NonexampleAscent),
            _ => Err(Error::Config(format!(
                "unknown attack {s:?} (expected fgsm, pgd, constant_offset or nonexample_ascent)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::ConstantOffset => "constant_offset",
            AttackKind::NonexampleAscent => "nonexample_ascent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_init: bool,
    pub clip_range: (f64, f64),
    /// Initial noise std for non-example ascent.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64, clip_range: (f64, f64)) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            step_size: epsilon.max(f64::MIN_POSITIVE),
            iterations: 1,
            random_init: false,
            clip_range,
            noise_sigma: 0.1,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, iterations: usize, random_init: bool, clip_range: (f64, f64)) -> Self {
        AttackConfig { kind: AttackKind::Pgd, step_size, iterations, random_init, ..Self::fgsm(epsilon, clip_range) }
    }

    pub fn nonexample(steps: usize, step_size: f64, noise_sigma: f64, clip_range: (f64, f64)) -> Self {
        AttackConfig {
            kind: AttackKind::NonexampleAscent,
            epsilon: 0.0,
            step_size,
            iterations: steps,
            random_init: true,
            clip_range,
            noise_sigma,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon >= 0.0) {
            return bad(format!("attack epsilon {} must be >= 0", self.epsilon));
        }
        if !(self.step_size > 0.0) {
            return bad(format!("attack step size {} must be > 0", self.step_size));
        }
        if self.kind == AttackKind::Pgd && self.iterations == 0 {
            return bad("pgd needs at least one iteration".into());
        }
        if !(self.clip_range.0 < self.clip_range.1) {
            return bad(format!("clip range {:?} is empty", self.clip_range));
        }
        if self.kind == AttackKind::Pgd && (self.iterations as f64) * self.step_size < self.epsilon {
            log::warn!(
                "under-powered pgd: {} iterations x step {} cannot reach epsilon {}",
                self.iterations,
                self.step_size,
                self.epsilon
            );
        }
        Ok(())
    }
}

/// Summed per-example loss and its gradient with respect to the batch.
pub fn loss_and_input_gradient(
    cfg: &ModelConfig,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f32, Tensor)> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let nodes = models::build(&mut g, cfg, params, xi, Mode::Eval, false, None)?;
    let loss = models::loss_sum(&mut g, cfg, nodes.logits, labels)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let grad = grads.take(xi).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, grad))
}

/// Per-example training loss (eval mode).
pub fn per_example_loss(cfg: &ModelConfig, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<Vec<f32>> {
    let logits = models::forward(cfg, params, x, Mode::Eval)?;
    let probs = models::probabilities(cfg, &logits);
    Ok(probs.iter().zip(labels).map(|(p, &l)| -(p[l].max(f32::MIN_POSITIVE)).ln()).collect())
}

fn clip(v: f32, (lo, hi): (f64, f64)) -> f32 {
    v.max(lo as f32).min(hi as f32)
}

pub fn fgsm(
    cfg: &ModelConfig,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    clip_range: (f64, f64),
) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("fgsm epsilon {epsilon} must be >= 0")));
    }
    let (_, grad) = loss_and_input_gradient(cfg, params, x, labels)?;
    let eps = epsilon as f32;
    x.zip_map(&grad, |v, g| clip(v + eps * sign(g), clip_range))
}

/// PGD where example `i` of the batch draws its random start from stream `first_index + i`.
pub fn pgd_indexed(
    cfg: &ModelConfig,
    params: &ParamSet,
    x0: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    first_index: u64,
) -> Result<Tensor> {
    attack.validate()?;
    let eps = attack.epsilon as f32;
    let alpha = attack.step_size as f32;
    let per = x0.len() / x0.shape()[0];
    let mut x = x0.clone();
    if attack.random_init {
        for (i, chunk) in x.data_mut().chunks_mut(per).enumerate() {
            let mut rng = Rng::derived(attack.seed, first_index + i as u64);
            for v in chunk {
                *v = clip(*v + rng.uniform(-attack.epsilon, attack.epsilon) as f32, attack.clip_range);
            }
        }
    }
    for _ in 0..attack.iterations {
        let (_, grad) = loss_and_input_gradient(cfg, params, &x, labels)?;
        for ((v, &g), &o) in x.data_mut().iter_mut().zip(grad.data()).zip(x0.data()) {
            let stepped = *v + alpha * sign(g);
            *v = clip(stepped.max(o - eps).min(o + eps), attack.clip_range);
        }
    }
    Ok(x)
}

pub fn pgd(cfg: &ModelConfig, params: &ParamSet, x0: &Tensor, labels: &[usize], attack: &AttackConfig) -> Result<Tensor> {
    pgd_indexed(cfg, params, x0, labels, attack, 0)
}

/// `clip(x + c)`; negative `c` subtracts.
pub fn constant_offset(x: &Tensor, c: f64, clip_range: (f64, f64)) -> Tensor {
    let c = c as f32;
    x.map(|v| clip(v + c, clip_range))
}

/// Dispatches the perturbation attacks (non-example ascent has no input batch).
pub fn perturb(
    cfg: &ModelConfig,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    first_index: u64,
) -> Result<Tensor> {
    match attack.kind {
        AttackKind::Fgsm => fgsm(cfg, params, x, labels, attack.epsilon, attack.clip_range),
        AttackKind::Pgd => pgd_indexed(cfg, params, x, labels, attack, first_index),
        AttackKind::ConstantOffset => Ok(constant_offset(x, attack.epsilon, attack.clip_range)),
        AttackKind::NonexampleAscent => {
            Err(Error::InvalidArgument("non-example ascent does not perturb a batch".into()))
        }
    }
}

/// A generated non-example.
#[derive(Debug, Clone, PartialEq)]
pub struct NonExample {
    pub target: usize,
    pub image: Tensor,
    /// Max softmax probability of the final image.
    pub confidence: f32,
    pub predicted: usize,
    /// Probability the model assigns to `target`.
    pub target_probability: f32,
}

/// Sign ascent on `log p(target | x)` from clipped Gaussian noise, one image per target.
///
/// Each target's noise comes from stream `target` of `attack.seed`, so the
/// result for a class does not depend on which other classes are requested.
pub fn nonexample_batch(
    cfg: &ModelConfig,
    params: &ParamSet,
    targets: &[usize],
    attack: &AttackConfig,
) -> Result<Vec<NonExample>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cfg.class_count) {
        return Err(Error::InvalidArgument(format!("target class {t} outside [0, {})", cfg.class_count)));
    }
    let per = cfg.input_len();
    let mut data = Vec::with_capacity(targets.len() * per);
    for &t in targets {
        let mut rng = Rng::derived(attack.seed, t as u64);
        data.extend((0..per).map(|_| clip((rng.normal() * attack.noise_sigma) as f32, attack.clip_range)));
    }
    let mut shape = vec![targets.len()];
    shape.extend_from_slice(&cfg.input_shape);
    let mut x = Tensor::new(&shape, data)?;
    let alpha = attack.step_size as f32;
    for _ in 0..attack.iterations {
        // Gradient of the cross-entropy toward `target` is minus the gradient of log p(target).
        let (_, grad) = loss_and_input_gradient(cfg, params, &x, targets)?;
        x = x.zip_map(&grad, |v, g| clip(v - alpha * sign(g), attack.clip_range))?;
    }
    let logits = models::forward(cfg, params, &x, Mode::Eval)?;
    let probs = models::probabilities(cfg, &logits);
    let preds = models::predictions(cfg, &logits);
    targets
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let p = &probs[i];
            Ok(NonExample {
                target,
                image: x.slice_rows(i, 1)?.into_reshaped(&cfg.input_shape)?,
                confidence: p.iter().fold(0.0f32, |m, &v| m.max(v)),
                predicted: preds[i],
                target_probability: p[target],
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn nonexample_ascent(
    cfg: &ModelConfig,
    params: &ParamSet,
    target: usize,
    steps: usize,
    step_size: f64,
    noise_sigma: f64,
    clip_range: (f64, f64),
    seed: u64,
) -> Result<(Tensor, f32)> {
    let attack = AttackConfig { seed, ..AttackConfig::nonexample(steps, step_size, noise_sigma, clip_range) };
    let mut out = nonexample_batch(cfg, params, &[target], &attack)?;
    let ne = out.pop().expect("one target");
    Ok((ne.image, ne.confidence))
}

/// Largest L2 norm of a perturbation in an `n`-dimensional L-infinity ball of radius `eps_inf`.
pub fn linf_to_l2_bound(n: usize, eps_inf: f64) -> f64 {
    (n as f64).sqrt() * eps_inf
}
