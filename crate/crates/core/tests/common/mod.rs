#![allow(dead_code)]

use std::path::PathBuf;

use robustbench::attacks::{self, AttackConfig};
use robustbench::data::{self, Dataset, Split};
use robustbench::graph::Graph;
use robustbench::models::{self, InitScheme, ModelConfig};
use robustbench::quantization::{quantize_activations, quantize_gradients, quantize_weights};
use robustbench::{NodeId, Padding, Rng, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> robustbench::Result<NodeId>>;
type Sampler = Box<dyn Fn(&mut Rng, usize) -> f64>;

pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs with `false` enter the graph as constants and are not checked.
    pub differentiable: Vec<bool>,
    pub sample: Sampler,
    pub build: Build,
}

fn away_from(lo: f64, hi: f64, kinks: &'static [f64]) -> Sampler {
    Box::new(move |rng, _| loop {
        let v = rng.uniform(lo, hi);
        if kinks.iter().all(|k| (v - k).abs() > 0.05) {
            return v;
        }
    })
}

fn uniform(lo: f64, hi: f64) -> Sampler {
    away_from(lo, hi, &[])
}

fn prim(name: &'static str, shapes: &[&[usize]], build: Build) -> Primitive {
    Primitive {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        differentiable: vec![true; shapes.len()],
        sample: uniform(-2.0, 2.0),
        build,
    }
}

/// Every differentiable primitive of [`Graph`].
pub fn primitives() -> Vec<Primitive> {
    let mut list = vec![
        prim("add", &[&[3, 4], &[3, 4]], Box::new(|g, x| g.add(x[0], x[1]))),
        prim("add_broadcast", &[&[2, 3, 4], &[4]], Box::new(|g, x| g.add(x[0], x[1]))),
        prim("sub", &[&[3, 4], &[3, 4]], Box::new(|g, x| g.sub(x[0], x[1]))),
        prim("mul", &[&[3, 4], &[3, 4]], Box::new(|g, x| g.mul(x[0], x[1]))),
        prim("scale", &[&[5]], Box::new(|g, x| g.scale(x[0], -2.5))),
        prim("matmul", &[&[3, 4], &[4, 5]], Box::new(|g, x| g.matmul(x[0], x[1]))),
        prim(
            "conv2d_same_stride2",
            &[&[2, 7, 7, 2], &[3, 3, 2, 3]],
            Box::new(|g, x| g.conv2d(x[0], x[1], 2, Padding::Same)),
        ),
        prim(
            "conv2d_same_even_kernel",
            &[&[1, 9, 9, 1], &[4, 4, 1, 2]],
            Box::new(|g, x| g.conv2d(x[0], x[1], 2, Padding::Same)),
        ),
        prim(
            "conv2d_valid",
            &[&[2, 6, 6, 2], &[3, 3, 2, 2]],
            Box::new(|g, x| g.conv2d(x[0], x[1], 1, Padding::Valid)),
        ),
        Primitive { sample: away_from(-2.0, 2.0, &[0.0]), ..prim("relu", &[&[4, 5]], Box::new(|g, x| g.relu(x[0]))) },
        prim("sigmoid", &[&[4, 5]], Box::new(|g, x| g.sigmoid(x[0]))),
        prim("tanh", &[&[4, 5]], Box::new(|g, x| g.tanh(x[0]))),
        prim("softmax", &[&[3, 5]], Box::new(|g, x| g.softmax(x[0]))),
        prim("reduce_sum", &[&[3, 4]], Box::new(|g, x| g.reduce_sum(x[0]))),
        prim("reduce_mean", &[&[3, 4]], Box::new(|g, x| g.reduce_mean(x[0]))),
        prim("reshape", &[&[3, 4]], Box::new(|g, x| g.reshape(x[0], &[2, 6]))),
        Primitive {
            sample: away_from(-1.0, 1.0, &[-0.5, 0.5]),
            ..prim("clip", &[&[4, 5]], Box::new(|g, x| g.clip(x[0], -0.5, 0.5)))
        },
        Primitive { sample: away_from(-2.0, 2.0, &[0.0]), ..prim("sign", &[&[6]], Box::new(|g, x| g.sign(x[0]))) },
        prim("batch_norm_train", &[&[6, 3], &[3], &[3]], Box::new(|g, x| g.batch_norm(x[0], x[1], x[2], None))),
        prim(
            "batch_norm_eval",
            &[&[6, 3], &[3], &[3]],
            Box::new(|g, x| g.batch_norm(x[0], x[1], x[2], Some((&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])))),
        ),
        prim("standardize", &[&[3, 2, 2, 2]], Box::new(|g, x| g.standardize(x[0]))),
    ];
    list.push(Primitive {
        differentiable: vec![true, false],
        sample: Box::new(|rng, input| if input == 1 { (rng.below(2)) as f64 } else { rng.uniform(-4.0, 4.0) }),
        ..prim("sigmoid_cross_entropy", &[&[5, 1], &[5, 1]], Box::new(|g, x| g.sigmoid_cross_entropy(x[0], x[1])))
    });
    list.push(Primitive {
        differentiable: vec![true, false],
        sample: Box::new(|rng, input| if input == 1 { rng.uniform(0.0, 1.0) } else { rng.uniform(-3.0, 3.0) }),
        ..prim("softmax_cross_entropy", &[&[4, 5], &[4, 5]], Box::new(|g, x| g.softmax_cross_entropy(x[0], x[1])))
    });
    list
}

fn weighted_loss(p: &Primitive, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> (Graph<f64>, Vec<NodeId>, NodeId) {
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .zip(&p.differentiable)
        .map(|(t, &d)| if d { g.input(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = (p.build)(&mut g, &ids).expect("primitive builds");
    let w = g.constant(weights.clone().into_reshaped(g.value(out).shape()).expect("weights match output"));
    let prod = g.mul(out, w).expect("same shape");
    let loss = g.reduce_sum(prod).expect("sum");
    (g, ids, loss)
}

/// Largest relative error `|a - n| / (|a| + |n|)` (norm-wise per input) between the
/// analytic gradient and central differences over `trials` random inputs.
pub fn max_relative_error(p: &Primitive, trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let inputs: Vec<Tensor<f64>> = p
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product();
                Tensor::new(s, (0..n).map(|_| (p.sample)(&mut rng, i)).collect()).unwrap()
            })
            .collect();
        let mut probe = Graph::<f64>::new();
        let probe_ids: Vec<NodeId> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let out = (p.build)(&mut probe, &probe_ids).unwrap();
        let out_shape = probe.value(out).shape().to_vec();
        let n_out: usize = out_shape.iter().product();
        let weights = Tensor::new(&out_shape, (0..n_out).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();

        let (mut g, ids, loss) = weighted_loss(p, &inputs, &weights);
        let grads = g.backward(loss).unwrap();
        for (i, input) in inputs.iter().enumerate() {
            if !p.differentiable[i] {
                continue;
            }
            let analytic = grads.get(ids[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            let mut diff = 0.0;
            let mut scale = 0.0;
            for k in 0..input.len() {
                let eval = |delta: f64| {
                    let mut shifted = inputs.clone();
                    shifted[i].data_mut()[k] += delta;
                    let (g, _, loss) = weighted_loss(p, &shifted, &weights);
                    g.value(loss).item()
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                let a = analytic.data()[k];
                diff += (a - numeric).powi(2);
                scale += a.powi(2) + numeric.powi(2);
            }
            let rel = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale.sqrt() };
            worst = worst.max(rel);
        }
    }
    worst
}

fn random_tensor(rng: &mut Rng, len: usize, spread: f64) -> Tensor<f64> {
    Tensor::from_vec((0..len).map(|_| rng.normal() * spread).collect())
}

fn distinct(t: &Tensor<f64>) -> usize {
    let mut v = t.data().to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v.len()
}

/// One law of the quantizer suite: name and the failures found (empty when it holds).
pub struct LawResult {
    pub law: &'static str,
    pub failures: Vec<String>,
}

/// Runs every quantizer law over `tensors` random tensors per bit width.
pub fn quantizer_laws(tensors: usize, seed: u64) -> Vec<LawResult> {
    let mut rng = Rng::new(seed);
    let mut idem_w = Vec::new();
    let mut idem_a = Vec::new();
    let mut mono = Vec::new();
    let mut levels = Vec::new();
    let mut ste = Vec::new();
    let mut exact = Vec::new();
    for bits in 1..=32u32 {
        for t in 0..tensors {
            let spread = [0.05, 1.0, 3.0][t % 3];
            let w = random_tensor(&mut rng, 48, spread);
            let a = w.map(|v| v + 0.5);
            let qw = quantize_weights(&w, bits).unwrap();
            let qa = quantize_activations(&a, bits).unwrap();
            if bits < 32 {
                if quantize_weights(&qw, bits).unwrap() != qw {
                    idem_w.push(bits);
                }
                if quantize_activations(&qa, bits).unwrap() != qa {
                    idem_a.push(bits);
                }
                let cap = 2f64.powi(bits as i32);
                let qg = quantize_gradients(&w, bits, &mut rng).unwrap();
                for (kind, q) in [("weights", &qw), ("activations", &qa), ("gradients", &qg)] {
                    if distinct(q) as f64 > cap {
                        levels.push(format!("{kind} k={bits}: {} levels", distinct(q)));
                    }
                }
            } else {
                let g = random_tensor(&mut rng, 48, spread);
                let same = |x: &Tensor<f64>, y: &Tensor<f64>| {
                    x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                };
                let qg = quantize_gradients(&g, 32, &mut rng).unwrap();
                if !same(&qw, &w) || !same(&qa, &a) || !same(&qg, &g) {
                    exact.push(format!("tensor {t}"));
                }
            }
            let mut sorted = a.data().to_vec();
            sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let qs = quantize_activations(&Tensor::from_vec(sorted.clone()), bits).unwrap();
            let qsw = quantize_weights(&Tensor::from_vec(sorted), bits).unwrap();
            if qs.data().windows(2).any(|p| p[0] > p[1]) || qsw.data().windows(2).any(|p| p[0] > p[1]) {
                mono.push(bits);
            }
            if let Some(f) = ste_failure(&w, &a, bits) {
                ste.push(f);
            }
        }
    }
    let squash = |mut v: Vec<u32>| {
        v.dedup();
        v.iter().map(|b| format!("k={b}")).collect::<Vec<_>>()
    };
    vec![
        LawResult { law: "weight idempotence", failures: squash(idem_w) },
        LawResult { law: "activation idempotence", failures: squash(idem_a) },
        LawResult { law: "monotonicity", failures: squash(mono) },
        LawResult { law: "level cardinality", failures: levels },
        LawResult { law: "STE passthrough", failures: ste },
        LawResult { law: "bits=32 bit-exactness", failures: exact },
    ]
}

/// Gradient through each quantizer equals the upstream gradient (clipped to [0, 1] for activations).
fn ste_failure(w: &Tensor<f64>, a: &Tensor<f64>, bits: u32) -> Option<String> {
    let mut rng = Rng::new(bits as u64);
    let upstream = random_tensor(&mut rng, w.len(), 1.0);
    let check = |x: &Tensor<f64>, op: &dyn Fn(&mut Graph<f64>, NodeId) -> NodeId, gate: &dyn Fn(f64) -> bool| {
        let mut g = Graph::<f64>::new();
        let xi = g.input(x.clone());
        let q = op(&mut g, xi);
        let u = g.constant(upstream.clone());
        let prod = g.mul(q, u).unwrap();
        let loss = g.reduce_sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let got = grads.get(xi).unwrap();
        got.data()
            .iter()
            .zip(upstream.data())
            .zip(x.data())
            .all(|((&d, &u), &v)| d == if gate(v) { u } else { 0.0 })
    };
    let all = |_: f64| true;
    let inside = |v: f64| bits == 32 || (0.0..=1.0).contains(&v);
    if !check(w, &|g, x| g.quantize_weights(x, bits).unwrap(), &all) {
        return Some(format!("weights k={bits}"));
    }
    if !check(a, &|g, x| g.quantize_activations(x, bits).unwrap(), &inside) {
        return Some(format!("activations k={bits}"));
    }
    if bits == 32 && !check(w, &|g, x| g.quantize_gradients(x, 32, Rng::new(0)).unwrap(), &all) {
        return Some("gradients k=32".into());
    }
    None
}

fn fuzz_model(rng: &mut Rng) -> (ModelConfig, (f64, f64)) {
    match rng.below(3) {
        0 => (ModelConfig::logistic_regression(&[6, 6, 1]), (0.0, 1.0)),
        1 => {
            let mut c = ModelConfig::spheres_mlp(2, 6);
            if rng.below(2) == 1 {
                c = c.with_quant(robustbench::QuantSpec::new(1, 2, 32).unwrap());
            }
            (c, (-2.0, 2.0))
        }
        _ => (ModelConfig::vanilla_cnn(&[20, 20, 1], 3, 2), (0.0, 1.0)),
    }
}

/// Violations found in `runs` random FGSM/PGD configurations: leaving the
/// epsilon ball, leaving the pixel range, or PGD(1 step, no start, step = eps) != FGSM.
pub fn attack_fuzz(runs: usize, seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed);
    let mut violations = Vec::new();
    for run in 0..runs {
        let (cfg, range) = fuzz_model(&mut rng);
        let params = models::init_params(&cfg, InitScheme::Glorot, &mut rng).unwrap();
        let batch = 1 + rng.below(4) as usize;
        let mut shape = vec![batch];
        shape.extend_from_slice(&cfg.input_shape);
        let len = batch * cfg.input_len();
        let x = Tensor::new(&shape, (0..len).map(|_| rng.uniform(range.0, range.1) as f32).collect()).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.below(cfg.class_count as u64) as usize).collect();
        let eps = rng.uniform(0.0, 0.5);
        let step = rng.uniform(0.001, 0.2);
        let iterations = 1 + rng.below(6) as usize;
        let random_init = rng.below(2) == 1;
        let pgd_cfg = AttackConfig { seed: run as u64, ..AttackConfig::pgd(eps, step, iterations, random_init, range) };
        let adv = [
            ("fgsm", attacks::fgsm(&cfg, &params, &x, &labels, eps, range).unwrap()),
            ("pgd", attacks::pgd(&cfg, &params, &x, &labels, &pgd_cfg).unwrap()),
        ];
        for (name, a) in &adv {
            for (&v, &o) in a.data().iter().zip(x.data()) {
                if (v - o).abs() as f64 > eps + 1e-6 {
                    violations.push(format!("run {run} {name}: |{v} - {o}| > {eps}"));
                    break;
                }
                if (v as f64) < range.0 || (v as f64) > range.1 {
                    violations.push(format!("run {run} {name}: {v} outside {range:?}"));
                    break;
                }
            }
        }
        let one_step = attacks::pgd(&cfg, &params, &x, &labels, &AttackConfig::pgd(eps, eps.max(f64::MIN_POSITIVE), 1, false, range)).unwrap();
        let fgsm_bits: Vec<u32> = adv[0].1.data().iter().map(|v| v.to_bits()).collect();
        let pgd_bits: Vec<u32> = one_step.data().iter().map(|v| v.to_bits()).collect();
        if eps > 0.0 && fgsm_bits != pgd_bits {
            violations.push(format!("run {run}: one-step pgd differs from fgsm"));
        }
    }
    violations
}

/// Per-input FGSM optimality on a linear model: count of random feasible
/// perturbations whose loss beats the FGSM loss.
pub fn fgsm_optimality_violations(
    cfg: &ModelConfig,
    params: &robustbench::ParamSet,
    d: &Dataset,
    inputs: usize,
    draws: usize,
    eps: f64,
    seed: u64,
) -> usize {
    let mut rng = Rng::new(seed);
    let mut violations = 0;
    for i in 0..inputs.min(d.len()) {
        let (x, labels) = d.batch(&[i]).unwrap();
        let adv = attacks::fgsm(cfg, params, &x, &labels, eps, d.pixel_range).unwrap();
        let best = attacks::per_example_loss(cfg, params, &adv, &labels).unwrap()[0] as f64;
        let mut batch = Vec::with_capacity(draws * x.len());
        for _ in 0..draws {
            batch.extend(x.data().iter().map(|&v| {
                (v as f64 + rng.uniform(-eps, eps)).clamp(d.pixel_range.0, d.pixel_range.1) as f32
            }));
        }
        let mut shape = vec![draws];
        shape.extend_from_slice(&d.sample_shape);
        let rand = Tensor::new(&shape, batch).unwrap();
        let losses = attacks::per_example_loss(cfg, params, &rand, &vec![labels[0]; draws]).unwrap();
        // Float slack: a few ulps of the loss value.
        let slack = 1e-5 * (1.0 + best.abs());
        violations += losses.iter().filter(|&&l| l as f64 > best + slack).count();
    }
    violations
}

/// `$ROBUSTBENCH_DATA`, else `<workspace>/data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("ROBUSTBENCH_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn mnist_dir() -> Option<PathBuf> {
    let root = data_root();
    [root.join("mnist"), root].into_iter().find(|d| data::mnist_paths(d, Split::Train).0.is_file())
}

pub fn mnist(split: Split) -> Option<Dataset> {
    mnist_dir().map(|d| data::load_mnist(&d, split).expect("readable MNIST"))
}
