//! File-emitting pipelines behind the command-line subcommands.
//!
//! Each pipeline reads a resolved [`Settings`], writes its artifacts into the
//! `out` directory and finishes with a JSON manifest holding the resolved
//! configuration and the SHA-256 of every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackConfig, AttackKind};
use crate::checkpoint::Checkpoint;
use crate::config::Settings;
use crate::data::{self, Dataset, Quadrant, SpheresConfig, Split};
use crate::error::{Error, Result};
use crate::evaluation::{self, BoundingBox};
use crate::models::{self, InitScheme, ModelConfig, ModelKind, ParamSet};
use crate::quantization::QuantSpec;
use crate::rng::Rng;
use crate::training::{self, Adversary, Decay, Optimizer, TrainConfig};

pub const BUILD: &str = concat!("robustbench ", env!("CARGO_PKG_VERSION"));
pub const DATA_ENV: &str = "ROBUSTBENCH_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Attack,
    SweepOffset,
    Generate,
    Boundary,
    ExportWeights,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Train,
        Command::Attack,
        Command::SweepOffset,
        Command::Generate,
        Command::Boundary,
        Command::ExportWeights,
        Command::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attack => "attack",
            Command::SweepOffset => "sweep-offset",
            Command::Generate => "generate",
            Command::Boundary => "boundary",
            Command::ExportWeights => "export-weights",
            Command::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Artifact file name to SHA-256 (hex).
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn file_name(command: Command) -> String {
        format!("{}.manifest.json", command.name())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects artifacts written into one output directory.
struct Outputs {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), hashes: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        evaluation::write_file(&self.dir.join(name), bytes)?;
        self.hashes.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(self, command: Command, s: &Settings, metrics: BTreeMap<String, f64>) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.name().to_string(),
            build: BUILD.to_string(),
            seed: s.u64("seed")?,
            config: s.values().clone(),
            outputs: self.hashes,
            metrics,
        };
        let path = self.dir.join(Manifest::file_name(command));
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        evaluation::write_file(&path, &text)?;
        Ok(manifest)
    }
}

pub fn run(command: Command, s: &Settings) -> Result<Manifest> {
    match command {
        Command::Train => run_train(s),
        Command::Attack => run_attack(s),
        Command::SweepOffset => run_sweep_offset(s),
        Command::Generate => run_generate(s),
        Command::Boundary => run_boundary(s),
        Command::ExportWeights => run_export_weights(s),
        Command::Report => run_report(s),
    }
}

/// `data_dir` setting, else `$ROBUSTBENCH_DATA`, else `./data`.
pub fn data_root(s: &Settings) -> PathBuf {
    let configured = s.get("data_dir");
    if !configured.is_empty() {
        return PathBuf::from(configured);
    }
    std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Directory holding the MNIST IDX files: `<root>/mnist` if present, else `<root>`.
pub fn mnist_dir(root: &Path) -> Result<PathBuf> {
    for dir in [root.join("mnist"), root.to_path_buf()] {
        let (images, labels) = data::mnist_paths(&dir, Split::Train);
        if images.is_file() && labels.is_file() {
            return Ok(dir);
        }
    }
    Err(Error::MissingDataset(format!(
        "no MNIST IDX files (train-images-idx3-ubyte etc.) under {} or {}",
        root.join("mnist").display(),
        root.display()
    )))
}

fn cifar_files(root: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    for dir in [root.join("cifar-10-batches-bin"), root.join("cifar10"), root.to_path_buf()] {
        let files: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
        if files.iter().all(|f| f.is_file()) {
            return Ok(files);
        }
    }
    Err(Error::MissingDataset(format!("no CIFAR-10 binary batches under {}", root.display())))
}

fn spheres_config(s: &Settings, split: Split) -> Result<SpheresConfig> {
    let removed = s.list::<String>("spheres_removed")?.iter().map(|q| Quadrant::parse(q)).collect::<Result<_>>()?;
    Ok(SpheresConfig {
        dim: s.usize("spheres_dim")?,
        inner_radius: s.f64("spheres_inner")?,
        outer_radius: s.f64("spheres_outer")?,
        samples_per_class: s.usize(match split {
            Split::Train => "spheres_samples",
            Split::Test => "spheres_test_samples",
        })?,
        removed_quadrants: removed,
        seed: s.u64("seed")?,
    })
}

/// Loads (or generates) one split, truncated to `train_limit` / `eval_limit`.
pub fn load_dataset(s: &Settings, split: Split) -> Result<Dataset> {
    let name = s.one_of("dataset", &["mnist37", "mnist", "spheres", "cifar10"])?;
    let d = match name {
        "mnist37" | "mnist" => {
            let d = data::load_mnist(&mnist_dir(&data_root(s))?, split)?;
            if name == "mnist37" {
                data::filter_three_seven(&d)
            } else {
                d
            }
        }
        "spheres" => data::spheres_generate(&spheres_config(s, split)?, split)?,
        _ => {
            let files = cifar_files(&data_root(s), split)?;
            let mut parts = files.iter().map(data::load_cifar10_binary);
            let mut d = parts.next().expect("at least one batch")?;
            for p in parts {
                let p = p?;
                d.images.extend_from_slice(&p.images);
                d.labels.extend_from_slice(&p.labels);
            }
            d
        }
    };
    let limit = s.usize(match split {
        Split::Train => "train_limit",
        Split::Test => "eval_limit",
    })?;
    Ok(if limit > 0 { d.first(limit) } else { d })
}

pub fn model_config(s: &Settings, d: &Dataset) -> Result<ModelConfig> {
    let kind = ModelKind::parse(s.get("model"))?;
    let mut cfg = match kind {
        ModelKind::LogisticRegression => {
            if d.class_count != 2 {
                return Err(Error::Config(format!("logistic_regression needs a 2-class dataset, got {}", d.class_count)));
            }
            ModelConfig::logistic_regression(&d.sample_shape)
        }
        ModelKind::SpheresMlp => {
            if d.sample_shape.len() != 1 {
                return Err(Error::Config("spheres_mlp needs flat (spheres) inputs".into()));
            }
            let mut c = ModelConfig::spheres_mlp(d.sample_shape[0], s.usize("hidden_width")?);
            c.class_count = d.class_count;
            c
        }
        ModelKind::VanillaCnn => ModelConfig::vanilla_cnn(&d.sample_shape, d.class_count, s.usize("filters")?),
    };
    cfg.quant = QuantSpec {
        weight_bits: s.u32("weight_bits")?,
        activation_bits: s.u32("activation_bits")?,
        gradient_bits: s.u32("gradient_bits")?,
        prune_fraction: s.f64("prune_fraction")?,
    };
    cfg.standardize_input = s.bool("standardize_input")?;
    if let Some(v) = s.auto_bool("quantize_first_layer")? {
        cfg.quantize_first_layer = v;
    }
    if let Some(v) = s.auto_bool("quantize_last_layer")? {
        cfg.quantize_last_layer = v;
    }
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn initial_params(s: &Settings, cfg: &ModelConfig, train: &Dataset) -> Result<ParamSet> {
    let mut rng = Rng::derived(s.u64("seed")?, 100);
    let scheme = match s.one_of("init", &["expert", "glorot", "truncated_normal", "zeros"])? {
        "expert" => {
            if cfg.kind != ModelKind::LogisticRegression || s.get("dataset") != "mnist37" {
                return Err(Error::Config("init = expert needs logistic_regression on mnist37".into()));
            }
            let mut ps = models::expert_init(train)?;
            if cfg.quant.prune_fraction > 0.0 {
                ps.prune_weights(cfg.quant.prune_fraction)?;
            }
            return Ok(ps);
        }
        "glorot" => InitScheme::Glorot,
        "truncated_normal" => InitScheme::TruncatedNormal { std: s.f64("init_std")? },
        _ => InitScheme::Zeros,
    };
    models::init_params(cfg, scheme, &mut rng)
}

pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let optimizer = match s.one_of("optimizer", &["adam", "sgd"])? {
        "adam" => Optimizer::Adam { beta1: s.f64("adam_beta1")?, beta2: s.f64("adam_beta2")?, eps: s.f64("adam_eps")? },
        _ => Optimizer::Sgd,
    };
    let lambda = s.f64("lambda")?;
    let decay = match s.one_of("decay", &["none", "l1", "l2"])? {
        "l1" => Decay::L1(lambda),
        "l2" => Decay::L2(lambda),
        _ => Decay::None,
    };
    let adversary = match s.one_of("adversary", &["none", "fgsm", "pgd"])? {
        "fgsm" => Adversary::Fgsm { epsilon: s.f64("adv_epsilon")? },
        "pgd" => Adversary::Pgd {
            steps: s.usize("adv_steps")?,
            epsilon: s.f64("adv_epsilon")?,
            step_size: s.f64("adv_step_size")?,
            random_init: s.bool("adv_random_init")?,
        },
        _ => Adversary::None,
    };
    let cfg = TrainConfig {
        optimizer,
        learning_rate: s.f64("learning_rate")?,
        batch_size: s.usize("batch_size")?,
        total_steps: s.usize("steps")?,
        decay,
        decay_scope: s.list("decay_scope")?,
        adversary,
        adversarial_fraction: s.f64("adv_fraction")?,
        log_interval: s.usize("log_interval")?,
        seed: s.u64("seed")?,
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn checkpoint_path(s: &Settings) -> PathBuf {
    match s.get("checkpoint") {
        "" => s.path("out").join("model.ckpt"),
        p => PathBuf::from(p),
    }
}

fn load_checkpoint(s: &Settings) -> Result<Checkpoint> {
    Checkpoint::load(checkpoint_path(s))
}

/// Test split checked against the checkpoint's input shape.
fn eval_data(s: &Settings, cfg: &ModelConfig) -> Result<Dataset> {
    let d = load_dataset(s, Split::Test)?;
    if d.sample_shape != cfg.input_shape || d.class_count != cfg.class_count {
        return Err(Error::Architecture(format!(
            "checkpoint expects inputs {:?} with {} classes; dataset {} has {:?} with {}",
            cfg.input_shape,
            cfg.class_count,
            s.get("dataset"),
            d.sample_shape,
            d.class_count
        )));
    }
    Ok(d)
}

fn run_train(s: &Settings) -> Result<Manifest> {
    let tc = train_config(s)?;
    let train_d = load_dataset(s, Split::Train)?;
    let test_d = load_dataset(s, Split::Test)?;
    let cfg = model_config(s, &train_d)?;
    let init = initial_params(s, &cfg, &train_d)?;
    let (params, log) = training::train(&cfg, &init, &train_d, &tc)?;

    let mut out = Outputs::new(&s.path("out"))?;
    let ck = Checkpoint { config: cfg.clone(), params, rng: Some(Rng::derived(tc.seed, 0)) };
    out.write("model.ckpt", &ck.to_bytes()?)?;
    out.write("train_log.csv", &log.to_csv()?)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("test_accuracy".to_string(), evaluation::accuracy(&cfg, &ck.params, &test_d)?);
    let eps = s.f64("eval_epsilon")?;
    if eps > 0.0 {
        let attack = AttackConfig::fgsm(eps, test_d.pixel_range);
        metrics.insert("fgsm_accuracy".into(), evaluation::attacked_accuracy(&cfg, &ck.params, &test_d, &attack)?);
        metrics.insert("fgsm_epsilon".into(), eps);
    }
    metrics.insert("weight_bits".into(), cfg.quant.weight_bits as f64);
    metrics.insert("activation_bits".into(), cfg.quant.activation_bits as f64);
    metrics.insert("gradient_bits".into(), cfg.quant.gradient_bits as f64);
    let mut text = serde_json::to_vec_pretty(&metrics)?;
    text.push(b'\n');
    out.write("metrics.json", &text)?;
    out.finish(Command::Train, s, metrics)
}

fn attack_config(s: &Settings, range: (f64, f64)) -> Result<AttackConfig> {
    let kind = AttackKind::parse(s.get("attack"))?;
    if kind == AttackKind::NonexampleAscent {
        return Err(Error::Config("attack = nonexample_ascent is run by the generate subcommand".into()));
    }
    Ok(AttackConfig {
        kind,
        step_size: s.f64("attack_step_size")?,
        iterations: s.usize("attack_iterations")?,
        random_init: s.bool("attack_random_init")?,
        seed: s.u64("seed")?,
        ..AttackConfig::fgsm(0.0, range)
    })
}

fn run_attack(s: &Settings) -> Result<Manifest> {
    let ck = load_checkpoint(s)?;
    let test_d = eval_data(s, &ck.config)?;
    let attack = attack_config(s, test_d.pixel_range)?;
    let curve = evaluation::robustness_curve(&ck.config, &ck.params, &test_d, &attack, &s.list("epsilons")?)?;
    let mut out = Outputs::new(&s.path("out"))?;
    out.write("robustness.csv", &curve.to_csv()?)?;
    let metrics = BTreeMap::from([("area".to_string(), curve.area())]);
    out.finish(Command::Attack, s, metrics)
}

fn run_sweep_offset(s: &Settings) -> Result<Manifest> {
    let ck = load_checkpoint(s)?;
    let test_d = eval_data(s, &ck.config)?;
    let mut offsets: Vec<f64> = s.list("offsets")?;
    if offsets.is_empty() {
        offsets = evaluation::default_offsets();
    }
    let (added, subtracted) = evaluation::offset_sweep(&ck.config, &ck.params, &test_d, &offsets)?;
    let mut out = Outputs::new(&s.path("out"))?;
    out.write("offset_sweep.csv", &evaluation::offset_sweep_csv(&added, &subtracted)?)?;
    let metrics = BTreeMap::from([
        ("area_added".to_string(), added.area()),
        ("area_subtracted".to_string(), subtracted.area()),
    ]);
    out.finish(Command::SweepOffset, s, metrics)
}

fn run_generate(s: &Settings) -> Result<Manifest> {
    let ck = load_checkpoint(s)?;
    let cfg = &ck.config;
    if cfg.input_shape.len() != 3 {
        return Err(Error::Architecture("generate needs an image model (HxWxC input)".into()));
    }
    let range = match s.get("dataset") {
        "cifar10" => (0.0, 255.0),
        _ => (0.0, 1.0),
    };
    let mut classes: Vec<usize> = s.list("ne_classes")?;
    if classes.is_empty() {
        classes = (0..cfg.class_count).collect();
    }
    let attack = AttackConfig {
        seed: s.u64("seed")?,
        ..AttackConfig::nonexample(s.usize("ne_steps")?, s.f64("ne_step_size")?, s.f64("ne_sigma")?, range)
    };
    attack.validate()?;
    let items = attacks::nonexample_batch(cfg, &ck.params, &classes, &attack)?;
    let mut out = Outputs::new(&s.path("out"))?;
    for ne in &items {
        out.write(&format!("nonexample_{}.pgm", ne.target), &evaluation::image_pgm(&ne.image, range)?)?;
    }
    out.write("confidences.csv", &evaluation::confidences_csv(&items)?)?;
    let confs: Vec<f64> = items.iter().map(|n| n.confidence as f64).collect();
    let metrics = BTreeMap::from([
        ("mean_confidence".to_string(), confs.iter().sum::<f64>() / confs.len() as f64),
        ("min_confidence".to_string(), confs.iter().copied().fold(f64::INFINITY, f64::min)),
        ("max_confidence".to_string(), confs.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
    ]);
    out.finish(Command::Generate, s, metrics)
}

fn run_boundary(s: &Settings) -> Result<Manifest> {
    let ck = load_checkpoint(s)?;
    let extent = s.f64("grid_extent")?;
    let bbox = BoundingBox { x0: (-extent, extent), x1: (-extent, extent) };
    let grid = evaluation::boundary_grid(&ck.config, &ck.params, bbox, s.usize("grid_resolution")?)?;
    let held: Vec<Quadrant> = spheres_config(s, Split::Train)?.removed_quadrants;
    let stats = evaluation::boundary_radius_stats(
        &ck.config,
        &ck.params,
        &evaluation::ray_angles(s.usize("rays")?),
        s.f64("ray_r_lo")?,
        s.f64("ray_r_hi")?,
        &held,
    )?;
    let mut out = Outputs::new(&s.path("out"))?;
    out.write("boundary_grid.csv", &evaluation::boundary_grid_csv(&grid)?)?;
    out.write("boundary_rays.csv", &evaluation::boundary_rays_csv(&stats)?)?;
    let mut metrics = BTreeMap::new();
    for (prefix, sum) in [("held_out", &stats.held_out), ("trained", &stats.trained)] {
        metrics.insert(format!("{prefix}_radius_mean"), sum.mean);
        metrics.insert(format!("{prefix}_radius_min"), sum.min);
        metrics.insert(format!("{prefix}_radius_max"), sum.max);
        metrics.insert(format!("{prefix}_no_boundary"), sum.no_boundary as f64);
    }
    out.finish(Command::Boundary, s, metrics)
}

fn run_export_weights(s: &Settings) -> Result<Manifest> {
    let ck = load_checkpoint(s)?;
    let mut out = Outputs::new(&s.path("out"))?;
    let mut metrics = BTreeMap::new();
    match ck.config.kind {
        ModelKind::LogisticRegression => {
            let w = ck.params.get("linear/w")?;
            if w.len() != 784 {
                return Err(Error::Architecture(format!("weight image needs 784 weights, model has {}", w.len())));
            }
            let px = evaluation::weight_image_pixels(w);
            out.write("weights.pgm", &evaluation::pgm_bytes(28, 28, &px)?)?;
        }
        ModelKind::VanillaCnn => {
            let tau = s.f64("tau")? as f32;
            let report = models::kernel_sparsity_report(&ck.params, tau);
            let rows = report.iter().map(|r| {
                let survivors: Vec<String> = r.survivors.iter().map(f32::to_string).collect();
                vec![r.layer.clone(), r.kernels.to_string(), r.dead_fraction.to_string(), survivors.join(" ")]
            });
            let bytes = evaluation::csv_bytes(&["layer", "kernels", "dead_fraction", "survivor_max_abs"], rows)?;
            out.write("kernel_sparsity.csv", &bytes)?;
            for r in &report {
                metrics.insert(format!("{}_dead_fraction", r.layer), r.dead_fraction);
            }
        }
        ModelKind::SpheresMlp => {
            return Err(Error::Architecture("export-weights supports logistic_regression and vanilla_cnn".into()))
        }
    }
    out.finish(Command::ExportWeights, s, metrics)
}

/// One row per run directory under `runs_dir` holding a `metrics.json`, sorted by name.
fn run_report(s: &Settings) -> Result<Manifest> {
    let root = s.path("runs_dir");
    let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut rows = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&root, e))?;
        let metrics_path = entry.path().join("metrics.json");
        if !metrics_path.is_file() {
            continue;
        }
        let text = fs::read(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let m: BTreeMap<String, f64> = serde_json::from_slice(&text)?;
        let field = |k: &str| m.get(k).map(|v| v.to_string()).unwrap_or_default();
        let name = entry.file_name().to_string_lossy().into_owned();
        rows.push(vec![
            name,
            field("weight_bits"),
            field("activation_bits"),
            field("gradient_bits"),
            field("test_accuracy"),
            field("fgsm_accuracy"),
        ]);
    }
    rows.sort();
    let count = rows.len();
    let bytes = evaluation::csv_bytes(
        &["model", "weight_bits", "activation_bits", "gradient_bits", "test_accuracy", "fgsm_accuracy"],
        rows,
    )?;
    let mut out = Outputs::new(&s.path("out"))?;
    out.write("report.csv", &bytes)?;
    out.finish(Command::Report, s, BTreeMap::from([("runs".to_string(), count as f64)]))
}
