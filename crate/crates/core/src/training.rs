//! Optimizers, weight decay and the (optionally adversarial) training loop.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{sign, Graph};
use crate::models::{self, ModelConfig, Mode, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "lambda")]
pub enum Decay {
    None,
    L1(f64),
    L2(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Adversary {
    None,
    Fgsm { epsilon: f64 },
    Pgd { steps: usize, epsilon: f64, step_size: f64, random_init: bool },
}

impl Adversary {
    pub fn epsilon(&self) -> f64 {
        match *self {
            Adversary::None => 0.0,
            Adversary::Fgsm { epsilon } | Adversary::Pgd { epsilon, .. } => epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub decay: Decay,
    /// Layers whose weights are decayed; empty means every layer.
    pub decay_scope: Vec<String>,
    pub adversary: Adversary,
    /// Share of each batch replaced by adversarial examples.
    pub adversarial_fraction: f64,
    /// Steps per logged row.
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::adam(),
            learning_rate: 1e-3,
            batch_size: 128,
            total_steps: 1000,
            decay: Decay::None,
            decay_scope: Vec::new(),
            adversary: Adversary::None,
            adversarial_fraction: 1.0,
            log_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if let Decay::L1(l) | Decay::L2(l) = self.decay {
            if !(l >= 0.0) {
                return bad(format!("decay lambda {l} must be >= 0"));
            }
        }
        match self.adversary {
            Adversary::Fgsm { epsilon } if !(epsilon > 0.0) => return bad(format!("fgsm epsilon {epsilon} must be > 0")),
            Adversary::Pgd { epsilon, step_size, steps, .. } => {
                if !(epsilon > 0.0) || !(step_size > 0.0) || steps == 0 {
                    return bad("pgd adversary needs epsilon > 0, step_size > 0 and steps >= 1".into());
                }
            }
            _ => {}
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return bad("batch_size and log_interval must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.adversarial_fraction) {
            return bad(format!("adversarial fraction {} outside [0, 1]", self.adversarial_fraction));
        }
        Ok(())
    }

    fn decays(&self, name: &str) -> bool {
        let Some(layer) = name.strip_suffix("/w") else { return false };
        self.decay_scope.is_empty() || self.decay_scope.iter().any(|s| s == layer)
    }
}

/// Adds the decay term: `lambda * w` for L2, `lambda * sign(w)` for L1.
pub fn apply_weight_decay(grad: &Tensor, w: &Tensor, decay: Decay) -> Result<Tensor> {
    match decay {
        Decay::None => Ok(grad.clone()),
        Decay::L2(l) => {
            let l = l as f32;
            grad.zip_map(w, |g, w| g + l * w)
        }
        Decay::L1(l) => {
            let l = l as f32;
            grad.zip_map(w, |g, w| g + l * sign(w))
        }
    }
}

/// Bias-corrected Adam moments for a set of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    /// One update of every tensor in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        (beta1, beta2, eps): (f64, f64, f64),
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let w = params.get_mut(name).ok_or_else(|| Error::Architecture(format!("no parameter {name:?}")))?;
            if w.shape() != g.shape() {
                return Err(Error::Shape(format!("adam: {name} is {:?}, gradient {:?}", w.shape(), g.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let (b1, b2) = (beta1 as f32, beta2 as f32);
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / c1;
                let v_hat = *v as f64 / c2;
                *w -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
pub fn sgd_step(params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    let lr = lr as f32;
    for (name, g) in grads {
        let w = params.get_mut(name).ok_or_else(|| Error::Architecture(format!("no parameter {name:?}")))?;
        *w = w.zip_map(g, |w, g| w - lr * g)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    /// Number of optimizer steps taken when the row was written.
    pub step: usize,
    /// Mean training loss over the interval.
    pub loss: f64,
    /// Accuracy on the clean training batches of the interval.
    pub clean_acc: f64,
    /// Accuracy on the adversarial training batches, when an adversary is set.
    pub adv_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(["step", "loss", "clean_acc", "adv_acc"]).map_err(csv_err)?;
        for r in &self.rows {
            let adv = r.adv_acc.map(|a| a.to_string()).unwrap_or_default();
            w.write_record([r.step.to_string(), r.loss.to_string(), r.clean_acc.to_string(), adv])
                .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

fn correct(cfg: &ModelConfig, logits: &Tensor, labels: &[usize]) -> usize {
    models::predictions(cfg, logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Runs `cfg.total_steps` optimizer steps from `params`.
///
/// Batches come from a Fisher-Yates shuffle of the dataset, reshuffled
/// whenever fewer than `batch_size` unseen examples remain. With an
/// adversary, the leading `adversarial_fraction` of each batch is replaced
/// by attacks on the current parameters before the update.
pub fn train(model: &ModelConfig, params: &ParamSet, data: &Dataset, cfg: &TrainConfig) -> Result<(ParamSet, TrainLog)> {
    cfg.validate()?;
    model.validate()?;
    params.check(model)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.sample_shape != model.input_shape {
        return Err(Error::Shape(format!(
            "train: dataset examples {:?} do not match model input {:?}",
            data.sample_shape, model.input_shape
        )));
    }
    let mut params = params.clone();
    let mut log = TrainLog::default();
    let mut shuffle_rng = Rng::derived(cfg.seed, 0);
    let mut grad_rng = Rng::derived(cfg.seed, 1);
    let batch_size = cfg.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut adam = AdamState::default();
    let adv_count = (cfg.adversarial_fraction * batch_size as f64).round() as usize;

    let (mut loss_sum, mut seen, mut clean_hits, mut adv_hits, mut adv_seen, mut interval) = (0.0, 0, 0, 0, 0, 0);
    for step in 0..cfg.total_steps {
        if cursor + batch_size > order.len() {
            shuffle_rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let (mut x, labels) = data.batch(idx)?;

        if cfg.adversary != Adversary::None && adv_count > 0 {
            let clean_logits = models::forward(model, &params, &x, Mode::Eval)?;
            clean_hits += correct(model, &clean_logits, &labels);
            x = adversarial_batch(model, &params, &x, &labels, adv_count, cfg, data.pixel_range, step)?;
        }

        let mut g = Graph::new();
        let xi = g.constant(x);
        let nodes = models::build(&mut g, model, &params, xi, Mode::Train, true, Some(&mut grad_rng))?;
        let loss = models::loss_mean(&mut g, model, nodes.logits, &labels)?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, loss: loss_value });
        }
        let hits = correct(model, g.value(nodes.logits), &labels);
        if cfg.adversary != Adversary::None && adv_count > 0 {
            adv_hits += hits;
            adv_seen += labels.len();
        } else {
            clean_hits += hits;
        }
        let grads = g.backward(loss)?;
        let mut named = BTreeMap::new();
        for name in params.params.keys() {
            let grad = match grads.param(name) {
                Some(t) => t.clone(),
                None => Tensor::zeros(params.params[name].shape()),
            };
            let grad = if cfg.decays(name) { apply_weight_decay(&grad, &params.params[name], cfg.decay)? } else { grad };
            if !grad.all_finite() {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            named.insert(name.clone(), grad);
        }
        models::update_running_stats(&mut params, &g, &nodes)?;
        match cfg.optimizer {
            Optimizer::Sgd => sgd_step(&mut params.params, &named, cfg.learning_rate)?,
            Optimizer::Adam { beta1, beta2, eps } => {
                adam.step(&mut params.params, &named, cfg.learning_rate, (beta1, beta2, eps))?
            }
        }
        params.apply_masks();

        loss_sum += loss_value;
        seen += labels.len();
        interval += 1;
        if (step + 1) % cfg.log_interval == 0 || step + 1 == cfg.total_steps {
            log.rows.push(LogRow {
                step: step + 1,
                loss: loss_sum / interval as f64,
                clean_acc: clean_hits as f64 / seen as f64,
                adv_acc: (adv_seen > 0).then(|| adv_hits as f64 / adv_seen as f64),
            });
            (loss_sum, seen, clean_hits, adv_hits, adv_seen, interval) = (0.0, 0, 0, 0, 0, 0);
        }
    }
    Ok((params, log))
}

#[allow(clippy::too_many_arguments)]
fn adversarial_batch(
    model: &ModelConfig,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    count: usize,
    cfg: &TrainConfig,
    pixel_range: (f64, f64),
    step: usize,
) -> Result<Tensor> {
    let n = labels.len();
    let count = count.min(n);
    let head = x.slice_rows(0, count)?;
    let attack = match cfg.adversary {
        Adversary::None => return Ok(x.clone()),
        Adversary::Fgsm { epsilon } => AttackConfig::fgsm(epsilon, pixel_range),
        Adversary::Pgd { steps, epsilon, step_size, random_init } => AttackConfig {
            seed: Rng::derived(cfg.seed, 2 + step as u64).next_u64(),
            ..AttackConfig::pgd(epsilon, step_size, steps, random_init, pixel_range)
        },
    };
    let adv = attacks::perturb(model, params, &head, &labels[..count], &attack, 0)?;
    let eps = attack.epsilon as f32;
    for (&a, &o) in adv.data().iter().zip(head.data()) {
        let inside = (a - o).abs() <= eps + 1e-6 && a >= pixel_range.0 as f32 && a <= pixel_range.1 as f32;
        if !inside {
            return Err(Error::InvalidArgument(format!(
                "adversarial example left the feasible set at step {step}: {a} from {o}"
            )));
        }
    }
    let per = x.len() / n;
    let mut data = adv.into_data();
    data.extend_from_slice(&x.data()[count * per..]);
    Tensor::new(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, InitScheme};

    #[test]
    fn decay_rules() {
        let g = Tensor::from_vec(vec![0.0, 0.0]);
        let w = Tensor::from_vec(vec![2.0, -4.0]);
        let l2 = apply_weight_decay(&g, &w, Decay::L2(0.1)).unwrap();
        assert!((l2.data()[0] - 0.2).abs() < 1e-7 && (l2.data()[1] + 0.4).abs() < 1e-7);
        assert_eq!(apply_weight_decay(&g, &w, Decay::L2(0.0)).unwrap(), g);
        let z = Tensor::from_vec(vec![0.0, 3.0]);
        assert_eq!(apply_weight_decay(&g, &z, Decay::L1(0.5)).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![1.0f32]))]);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![0.37f32]))]);
        let mut st = AdamState::default();
        st.step(&mut p, &g, 1e-3, (0.9, 0.999, 1e-8)).unwrap();
        assert!((p["w"].data()[0] - (1.0 - 1e-3)).abs() < 1e-7, "{:?}", p["w"]);

        let mut q = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![1.0f32]))]);
        let zero = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![0.0f32]))]);
        let mut st = AdamState::default();
        for _ in 0..10 {
            st.step(&mut q, &zero, 1e-1, (0.9, 0.999, 1e-8)).unwrap();
        }
        assert_eq!(q["w"].data(), &[1.0]);
    }

    fn toy() -> (ModelConfig, Dataset) {
        let mut rng = Rng::new(5);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..64 {
            let l = i % 2;
            for _ in 0..4 {
                images.push((rng.next_f64() * 0.5 + 0.5 * l as f64) as f32);
            }
            labels.push(l);
        }
        (ModelConfig::logistic_regression(&[4]), Dataset::new(vec![4], images, labels, (0.0, 1.0), 2).unwrap())
    }

    #[test]
    fn zero_steps_returns_params() {
        let (cfg, d) = toy();
        let ps = init_params(&cfg, InitScheme::TruncatedNormal { std: 0.1 }, &mut Rng::new(0)).unwrap();
        let tc = TrainConfig { total_steps: 0, ..TrainConfig::default() };
        let (out, log) = train(&cfg, &ps, &d, &tc).unwrap();
        assert_eq!(out, ps);
        assert!(log.rows.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (cfg, d) = toy();
        let ps = init_params(&cfg, InitScheme::Zeros, &mut Rng::new(0)).unwrap();
        let tc = TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            total_steps: 200,
            log_interval: 50,
            adversary: Adversary::Pgd { steps: 3, epsilon: 0.05, step_size: 0.02, random_init: true },
            ..TrainConfig::default()
        };
        let (a, la) = train(&cfg, &ps, &d, &tc).unwrap();
        let (b, lb) = train(&cfg, &ps, &d, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.rows.len(), 4);
        assert!(la.rows[3].loss < la.rows[0].loss);
        assert!(la.rows[3].adv_acc.is_some());
    }

    #[test]
    fn pruned_weights_stay_zero() {
        let (cfg, d) = toy();
        let mut ps = init_params(&cfg, InitScheme::TruncatedNormal { std: 0.1 }, &mut Rng::new(1)).unwrap();
        ps.prune_weights(0.5).unwrap();
        let tc = TrainConfig { learning_rate: 0.05, batch_size: 8, total_steps: 100, ..TrainConfig::default() };
        let (out, _) = train(&cfg, &ps, &d, &tc).unwrap();
        let mask = &ps.masks["linear/w"];
        for (w, m) in out.params["linear/w"].data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*w, 0.0);
            }
        }
    }

    #[test]
    fn divergence_reports_step() {
        let (cfg, d) = toy();
        let mut ps = init_params(&cfg, InitScheme::Zeros, &mut Rng::new(0)).unwrap();
        ps.params.get_mut("linear/b").unwrap().data_mut()[0] = f32::NAN;
        let err = train(&cfg, &ps, &d, &TrainConfig { total_steps: 5, ..TrainConfig::default() }).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }
}
