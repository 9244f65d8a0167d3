//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ROBUSTBENCH_ACCEPTANCE_ONLY=2,7` restricts the run to the listed criteria.
//! MNIST is read from `$ROBUSTBENCH_DATA` or `<workspace>/data`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use robustbench::attacks::{self, AttackConfig};
use robustbench::config::Settings;
use robustbench::data::{self, Dataset, Quadrant, SpheresConfig, Split};
use robustbench::evaluation;
use robustbench::experiment::{self, Command, Manifest};
use robustbench::models::{self, InitScheme, ModelConfig, ParamSet};
use robustbench::training::{self, Adversary, Decay, Optimizer, TrainConfig};
use robustbench::{QuantSpec, Rng};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }

    fn no_data() -> Self {
        Outcome::new(false, format!("MNIST not found under {}", common::data_root().display()))
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn within(v: f64, target: f64, tol: f64) -> bool {
    (v - target).abs() <= tol
}

fn three_seven() -> Option<(Dataset, Dataset)> {
    let train = common::mnist(Split::Train)?;
    let test = common::mnist(Split::Test)?;
    Some((data::filter_three_seven(&train), data::filter_three_seven(&test)))
}

fn fgsm_accuracy(cfg: &ModelConfig, params: &ParamSet, test: &Dataset, eps: f64) -> f64 {
    evaluation::attacked_accuracy(cfg, params, test, &AttackConfig::fgsm(eps, test.pixel_range)).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut failed = Vec::new();
    let prims = common::primitives();
    for p in &prims {
        let err = common::max_relative_error(p, 20, 1);
        if err >= common::GRAD_TOL {
            failed.push(format!("{} ({err:.2e})", p.name));
        }
        if err >= worst.1 {
            worst = (p.name, err);
        }
    }
    let fast = start.elapsed() < Duration::from_secs(60);
    Outcome::new(
        failed.is_empty() && fast,
        format!(
            "{} primitives x 20 inputs, worst {} {:.2e}{}",
            prims.len(),
            worst.0,
            worst.1,
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn criterion_2() -> Outcome {
    let Some((train, test)) = three_seven() else { return Outcome::no_data() };
    let cfg = ModelConfig::logistic_regression(&train.sample_shape);
    let params = models::expert_init(&train).unwrap();
    let clean = evaluation::accuracy(&cfg, &params, &test).unwrap();
    let adv = fgsm_accuracy(&cfg, &params, &test, 0.1);
    Outcome::new(
        within(clean, 0.948, 0.005) && within(adv, 0.801, 0.010),
        format!("clean {} (94.8 +- 0.5), FGSM(0.1) {} (80.1 +- 1.0)", pct(clean), pct(adv)),
    )
}

/// Reference logistic recipe: Adam, lr 1e-5, batch 128, 50k steps, L2 0.05, expert init.
fn table1_train(train: &Dataset, bits: u32, adversary: Adversary, seed: u64) -> (ModelConfig, ParamSet) {
    let quant = if bits == 32 { QuantSpec::full_precision() } else { QuantSpec::new(bits, 32, 32).unwrap() };
    let cfg = ModelConfig::logistic_regression(&train.sample_shape).with_quant(quant);
    let init = models::expert_init(train).unwrap();
    let tc = TrainConfig {
        optimizer: Optimizer::adam(),
        learning_rate: 1e-5,
        batch_size: 128,
        total_steps: 50_000,
        decay: Decay::L2(0.05),
        adversary,
        log_interval: 10_000,
        seed,
        ..TrainConfig::default()
    };
    let (params, _) = training::train(&cfg, &init, train, &tc).unwrap();
    (cfg, params)
}

fn criterion_3() -> Outcome {
    let Some((train, test)) = three_seven() else { return Outcome::no_data() };
    let start = Instant::now();
    let (cfg, params) = table1_train(&train, 32, Adversary::None, 0);
    let clean = evaluation::accuracy(&cfg, &params, &test).unwrap();
    let adv = fgsm_accuracy(&cfg, &params, &test, 0.1);
    let fast = start.elapsed() <= Duration::from_secs(15 * 60);
    Outcome::new(
        within(clean, 0.950, 0.015) && within(adv, 0.811, 0.050) && fast,
        format!("clean {} (95.0 +- 1.5), FGSM(0.1) {} (81.1 +- 5.0)", pct(clean), pct(adv)),
    )
}

fn criterion_4() -> Outcome {
    let Some((train, test)) = three_seven() else { return Outcome::no_data() };
    let eval = |(cfg, params): (ModelConfig, ParamSet)| {
        (evaluation::accuracy(&cfg, &params, &test).unwrap(), fgsm_accuracy(&cfg, &params, &test, 0.1))
    };
    let mut curves: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut plain3 = (0.0, 0.0);
    for seed in 0..3u64 {
        for bits in 3..=7u32 {
            let (clean, adv) = eval(table1_train(&train, bits, Adversary::None, seed));
            if bits == 3 && seed == 0 {
                plain3 = (clean, adv);
            }
            curves.entry(seed).or_default().push(adv);
        }
    }
    let adv3 = eval(table1_train(&train, 3, Adversary::Fgsm { epsilon: 0.1 }, 0));
    let part_a = adv3.0 > plain3.0 && adv3.1 < plain3.1;

    let mut inversions = Vec::new();
    for (seed, accs) in &curves {
        for (i, w) in accs.windows(2).enumerate() {
            if w[1] < w[0] {
                inversions.push((seed, 3 + i, w[0] - w[1]));
            }
        }
    }
    let part_b = inversions.len() <= 1 && inversions.iter().all(|&(_, _, drop)| drop <= 0.02);
    let fmt = |v: &Vec<f64>| v.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join("/");
    Outcome::new(
        part_a && part_b,
        format!(
            "(a) {}: adv-trained 3-bit {}/{} vs plain {}/{}; (b) {}: FGSM by bits 3..7 {}; inversions {:?}",
            if part_a { "ok" } else { "violated" },
            pct(adv3.0),
            pct(adv3.1),
            pct(plain3.0),
            pct(plain3.1),
            if part_b { "ok" } else { "violated" },
            curves.values().map(fmt).collect::<Vec<_>>().join(" | "),
            inversions.iter().map(|(s, b, d)| format!("seed {s} {b}->{} -{:.1}", b + 1, 100.0 * d)).collect::<Vec<_>>()
        ),
    )
}

fn criterion_5() -> Outcome {
    let Some((train, test)) = three_seven() else { return Outcome::no_data() };
    let cfg = ModelConfig::logistic_regression(&train.sample_shape);
    let params = models::expert_init(&train).unwrap();
    let violations = common::fgsm_optimality_violations(&cfg, &params, &test, 100, 1000, 0.1, 5);
    Outcome::new(violations == 0, format!("{violations} of 100000 random perturbations beat FGSM"))
}

fn criterion_6() -> Outcome {
    let v = common::attack_fuzz(1000, 6);
    Outcome::new(
        v.is_empty(),
        if v.is_empty() { "1000 fuzzed runs, no violation".to_string() } else { format!("{} violations: {:?}", v.len(), &v[..v.len().min(3)]) },
    )
}

fn criterion_7() -> Outcome {
    let a = attacks::linf_to_l2_bound(784, 0.3);
    let b = attacks::linf_to_l2_bound(3072, 8.0 / 255.0);
    Outcome::new(
        (a - 8.4).abs() <= 1e-12 && (b - 443.0 / 255.0).abs() <= 1e-12,
        format!("(784, 0.3) -> {a}, (3072, 8/255) -> {b}"),
    )
}

/// Training recipe for the non-example CNN.
struct CnnRecipe {
    filters: usize,
    optimizer: Optimizer,
    learning_rate: f64,
    batch_size: usize,
    steps: usize,
    init_std: f64,
}

const CNN: CnnRecipe = CnnRecipe {
    filters: 16,
    optimizer: Optimizer::Sgd,
    learning_rate: 0.05,
    batch_size: 64,
    steps: 2000,
    init_std: 0.1,
};

fn nonexample_confidences(train: &Dataset, lambda: f64, seed: u64) -> Vec<f64> {
    let cfg = ModelConfig::vanilla_cnn(&train.sample_shape, 10, CNN.filters);
    let init = models::init_params(&cfg, InitScheme::TruncatedNormal { std: CNN.init_std }, &mut Rng::derived(seed, 100)).unwrap();
    let tc = TrainConfig {
        optimizer: CNN.optimizer,
        learning_rate: CNN.learning_rate,
        batch_size: CNN.batch_size,
        total_steps: CNN.steps,
        decay: if lambda > 0.0 { Decay::L2(lambda) } else { Decay::None },
        log_interval: CNN.steps,
        seed,
        ..TrainConfig::default()
    };
    let (params, _) = training::train(&cfg, &init, train, &tc).unwrap();
    let attack = AttackConfig { seed, ..AttackConfig::nonexample(100, 0.01, 0.1, (0.0, 1.0)) };
    let items = attacks::nonexample_batch(&cfg, &params, &(0..10).collect::<Vec<_>>(), &attack).unwrap();
    items.iter().map(|n| n.confidence as f64).collect()
}

fn criterion_8() -> Outcome {
    let Some(train) = common::mnist(Split::Train) else { return Outcome::no_data() };
    let start = Instant::now();
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let plain = nonexample_confidences(&train, 0.0, seed);
        let reg = nonexample_confidences(&train, 0.5, seed);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (lo, hi) = reg.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let ok_plain = mean(&plain) >= 0.99;
        let ok_reg = lo >= 0.20 && hi <= 0.90 && mean(&reg) < 0.80;
        passes += usize::from(ok_plain && ok_reg);
        lines.push(format!(
            "seed {seed}: unregularized mean {:.3}{}, lambda 0.5 mean {:.3} range [{lo:.3}, {hi:.3}]{}",
            mean(&plain),
            if ok_plain { "" } else { " (low)" },
            mean(&reg),
            if ok_reg { "" } else { " (out of band)" }
        ));
    }
    let fast = start.elapsed() <= Duration::from_secs(30 * 60);
    Outcome::new(passes >= 2 && fast, format!("{passes}/3 seeds; {}", lines.join("; ")))
}

/// Spheres MLP recipe.
const SPHERES_WIDTH: usize = 1000;
const SPHERES_STEPS: usize = 1000;

fn spheres_run(seed: u64, quant: QuantSpec) -> (f64, f64, usize) {
    let removed = vec![Quadrant::parse("+-").unwrap(), Quadrant::parse("-+").unwrap()];
    let base = SpheresConfig { removed_quadrants: removed.clone(), seed, ..SpheresConfig::default() };
    let train = data::spheres_generate(&base, Split::Train).unwrap();
    let test = data::spheres_generate(&base, Split::Test).unwrap();
    let cfg = ModelConfig::spheres_mlp(2, SPHERES_WIDTH).with_quant(quant);
    let init = models::init_params(&cfg, InitScheme::Glorot, &mut Rng::derived(seed, 100)).unwrap();
    let tc = TrainConfig {
        optimizer: Optimizer::adam(),
        learning_rate: 1e-3,
        batch_size: 128,
        total_steps: SPHERES_STEPS,
        log_interval: SPHERES_STEPS,
        seed,
        ..TrainConfig::default()
    };
    let (params, _) = training::train(&cfg, &init, &train, &tc).unwrap();
    let kept: Vec<usize> = (0..test.len())
        .filter(|&i| {
            let p = test.image(i);
            !removed.contains(&Quadrant::of(p[0], p[1]))
        })
        .collect();
    let acc = evaluation::accuracy(&cfg, &params, &test.subset(&kept)).unwrap();
    let stats = evaluation::boundary_radius_stats(&cfg, &params, &evaluation::ray_angles(360), 0.5, 2.0, &removed).unwrap();
    // A held-out ray without a crossing means the boundary left the probe window.
    let spread = if stats.held_out.no_boundary > 0 { f64::INFINITY } else { stats.held_out.spread() };
    (acc, spread, stats.held_out.no_boundary)
}

fn criterion_9() -> Outcome {
    let mut smaller = 0;
    let mut all_accurate = true;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let (acc_fp, spread_fp, _) = spheres_run(seed, QuantSpec::full_precision());
        let (acc_q, spread_q, _) = spheres_run(seed, QuantSpec::new(1, 2, 32).unwrap());
        all_accurate &= acc_fp >= 0.99 && acc_q >= 0.99;
        smaller += usize::from(spread_q < spread_fp);
        lines.push(format!("seed {seed}: spread fp {spread_fp:.3} / 1w2a {spread_q:.3}, acc {} / {}", pct(acc_fp), pct(acc_q)));
    }
    Outcome::new(smaller >= 3 && all_accurate, format!("1w2a smaller in {smaller}/5; {}", lines.join("; ")))
}

fn criterion_10() -> Outcome {
    let laws = common::quantizer_laws(30, 10);
    let failing: Vec<String> =
        laws.iter().filter(|l| !l.failures.is_empty()).map(|l| format!("{} fails at {}", l.law, l.failures.join(" "))).collect();
    Outcome::new(
        failing.is_empty(),
        if failing.is_empty() {
            format!("{} laws hold for k = 1..32, 30 tensors each", laws.len())
        } else {
            failing.join("; ")
        },
    )
}

fn settings(out: &Path, pairs: &[(&str, &str)]) -> Settings {
    let mut s = Settings::default();
    s.set("out", out.to_str().unwrap()).unwrap();
    s.set("data_dir", common::data_root().to_str().unwrap()).unwrap();
    for (k, v) in pairs {
        s.set(k, v).unwrap();
    }
    s
}

/// Artifact bytes of every run directory under `root`, keyed by relative path.
fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for run in fs::read_dir(root).unwrap() {
        let run = run.unwrap().path();
        for f in fs::read_dir(&run).unwrap() {
            let f = f.unwrap().path();
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            if !name.ends_with(".manifest.json") {
                out.insert(format!("{}/{name}", run.file_name().unwrap().to_string_lossy()), fs::read(&f).unwrap());
            }
        }
    }
    out
}

fn pipelines(root: &Path, with_mnist: bool) -> robustbench::Result<()> {
    let spheres = [
        ("dataset", "spheres"),
        ("model", "spheres_mlp"),
        ("init", "glorot"),
        ("hidden_width", "32"),
        ("weight_bits", "1"),
        ("activation_bits", "2"),
        ("gradient_bits", "6"),
        ("spheres_samples", "500"),
        ("spheres_test_samples", "200"),
        ("steps", "200"),
        ("learning_rate", "1e-3"),
        ("log_interval", "50"),
        ("eval_epsilon", "0.1"),
        ("grid_resolution", "40"),
    ];
    let s = settings(&root.join("spheres"), &spheres);
    for c in [Command::Train, Command::Boundary, Command::Attack] {
        experiment::run(c, &s)?;
    }
    if with_mnist {
        let lr = [("steps", "500"), ("log_interval", "100"), ("eval_limit", "500"), ("weight_bits", "3")];
        let s = settings(&root.join("lr"), &lr);
        for c in [Command::Train, Command::Attack, Command::SweepOffset, Command::ExportWeights] {
            experiment::run(c, &s)?;
        }
        let cnn = [
            ("dataset", "mnist"),
            ("model", "vanilla_cnn"),
            ("init", "truncated_normal"),
            ("filters", "4"),
            ("optimizer", "sgd"),
            ("learning_rate", "0.05"),
            ("decay", "l2"),
            ("lambda", "0.5"),
            ("batch_size", "32"),
            ("steps", "60"),
            ("log_interval", "20"),
            ("train_limit", "2000"),
            ("eval_limit", "200"),
            ("ne_steps", "10"),
            ("adversary", "pgd"),
            ("adv_steps", "2"),
            ("adv_fraction", "0.5"),
        ];
        let s = settings(&root.join("cnn"), &cnn);
        for c in [Command::Train, Command::Generate, Command::ExportWeights] {
            experiment::run(c, &s)?;
        }
    }
    Ok(())
}

fn criterion_11() -> Outcome {
    let with_mnist = common::mnist_dir().is_some();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if let Err(e) = pipelines(&a, with_mnist).and_then(|_| pipelines(&b, with_mnist)) {
        return Outcome::new(false, format!("pipeline error: {e}"));
    }
    let (first, second) = (artifacts(&a), artifacts(&b));
    let mut mismatched: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();

    // Replaying the emitted train manifest reproduces the recorded hashes.
    let manifest_path = a.join("spheres").join(Manifest::file_name(Command::Train));
    let recorded: serde_json::Value = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    let mut replay = Settings::default();
    replay.apply_file(&manifest_path).unwrap();
    replay.set("out", tmp.path().join("replay").to_str().unwrap()).unwrap();
    let replayed = experiment::run(Command::Train, &replay).unwrap();
    let replay_name = "replay/train".to_string();
    for (file, hash) in &replayed.outputs {
        if recorded["outputs"][file].as_str() != Some(hash.as_str()) {
            mismatched.push(&replay_name);
        }
    }
    let scope = if with_mnist { "spheres, logistic and CNN pipelines" } else { "spheres pipelines only (no MNIST)" };
    Outcome::new(
        mismatched.is_empty() && with_mnist,
        format!("{} artifacts compared across {scope} plus a manifest replay; mismatches {:?}", first.len(), mismatched),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "gradient correctness", criterion_1),
    (2, "expert-init baseline", criterion_2),
    (3, "full-precision logistic regression", criterion_3),
    (4, "bit-width orderings", criterion_4),
    (5, "FGSM optimality", criterion_5),
    (6, "attack feasibility", criterion_6),
    (7, "norm bound", criterion_7),
    (8, "non-example confidence gap", criterion_8),
    (9, "spheres shape retention", criterion_9),
    (10, "quantizer laws", criterion_10),
    (11, "determinism", criterion_11),
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ROBUSTBENCH_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut passed = 0;
    let mut ran = 0;
    for (n, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        ran += 1;
        passed += usize::from(outcome.pass);
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{ran} criteria pass");
}
