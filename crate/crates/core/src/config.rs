//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; files and command-line overrides may only name
//! keys from [`KEYS`]. The fully resolved map is what manifests record, so a
//! manifest can be fed back in to repeat a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out", "runs/default", "output directory"),
    ("data_dir", "", "dataset root (falls back to ROBUSTBENCH_DATA, then ./data)"),
    ("seed", "0", "master seed"),
    ("dataset", "mnist37", "mnist37 | mnist | spheres | cifar10"),
    ("train_limit", "0", "use only the first N training examples (0 = all)"),
    ("eval_limit", "0", "use only the first N test examples (0 = all)"),
    ("model", "logistic_regression", "logistic_regression | spheres_mlp | vanilla_cnn"),
    ("init", "expert", "expert | glorot | truncated_normal | zeros"),
    ("init_std", "0.1", "std of the truncated-normal init"),
    ("filters", "64", "CNN base filter count"),
    ("hidden_width", "1000", "MLP hidden width"),
    ("weight_bits", "32", "weight precision (1..=32)"),
    ("activation_bits", "32", "activation precision (1..=32)"),
    ("gradient_bits", "32", "gradient precision (1..=32)"),
    ("prune_fraction", "0", "fraction of smallest weights pruned at init"),
    ("standardize_input", "false", "CNN: per-image standardization first"),
    ("quantize_first_layer", "auto", "auto | true | false"),
    ("quantize_last_layer", "auto", "auto | true | false"),
    ("optimizer", "adam", "adam | sgd"),
    ("learning_rate", "1e-5", "step size"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("batch_size", "128", "training batch size"),
    ("steps", "50000", "optimizer steps"),
    ("decay", "l2", "none | l1 | l2"),
    ("lambda", "0.05", "weight-decay constant"),
    ("decay_scope", "", "comma-separated layers to decay (empty = all)"),
    ("adversary", "none", "none | fgsm | pgd"),
    ("adv_epsilon", "0.1", "adversarial-training epsilon"),
    ("adv_steps", "40", "PGD adversary iterations"),
    ("adv_step_size", "0.01", "PGD adversary step"),
    ("adv_random_init", "true", "PGD adversary random start"),
    ("adv_fraction", "1", "share of each batch replaced by adversarial examples"),
    ("log_interval", "1000", "steps per training-log row"),
    ("eval_epsilon", "0.1", "FGSM epsilon for the metrics written after training"),
    ("checkpoint", "", "checkpoint to load (default: <out>/model.ckpt)"),
    ("attack", "fgsm", "fgsm | pgd | constant_offset"),
    ("epsilons", "0,0.05,0.1,0.15,0.2,0.25,0.3", "comma-separated attack strengths"),
    ("attack_step_size", "0.01", "PGD step"),
    ("attack_iterations", "40", "PGD iterations"),
    ("attack_random_init", "true", "PGD random start"),
    ("offsets", "", "comma-separated offsets (empty = 0.05k, k = 0..=20)"),
    ("ne_steps", "100", "non-example ascent steps"),
    ("ne_step_size", "0.01", "non-example ascent step"),
    ("ne_sigma", "0.1", "non-example initial noise std"),
    ("ne_classes", "", "comma-separated target classes (empty = all)"),
    ("spheres_dim", "2", "spheres dimension"),
    ("spheres_inner", "1.0", "inner radius"),
    ("spheres_outer", "1.3", "outer radius"),
    ("spheres_samples", "5000", "points per class before quadrant removal"),
    ("spheres_test_samples", "5000", "points per class in the test split"),
    ("spheres_removed", "+-,-+", "removed sign patterns of (x0, x1)"),
    ("grid_resolution", "200", "boundary grid points per axis"),
    ("grid_extent", "2", "boundary grid covers [-extent, extent]^2"),
    ("rays", "360", "rays for the decision-radius probe"),
    ("ray_r_lo", "0.5", "inner end of each ray"),
    ("ray_r_hi", "2.0", "outer end of each ray"),
    ("tau", "0.01", "dead-kernel threshold"),
    ("runs_dir", "runs", "directory scanned by report"),
];

pub fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Resolved settings: every key of [`KEYS`] mapped to a string value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        if !is_key(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    /// Applies a `key = value` file, or the `config` object of a JSON manifest.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let obj = v
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| Error::Config(format!("{}: manifest has no config object", path.display())))?;
            for (k, v) in obj {
                let s = v.as_str().ok_or_else(|| Error::Config(format!("manifest value for {k:?} is not a string")))?;
                self.set(k, s)?;
            }
            Ok(())
        } else {
            self.apply_text(&text)
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not a config key"))
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u32(&self, key: &str) -> Result<u32> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    /// `auto` maps to `None`.
    pub fn auto_bool(&self, key: &str) -> Result<Option<bool>> {
        if self.get(key) == "auto" {
            Ok(None)
        } else {
            self.bool(key).map(Some)
        }
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))))
            .collect()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    pub fn one_of<'a>(&self, key: &str, allowed: &[&'a str]) -> Result<&'a str> {
        let v = self.get(key);
        allowed
            .iter()
            .find(|a| **a == v)
            .copied()
            .ok_or_else(|| Error::Config(format!("{key}: {v:?} is not one of {}", allowed.join(", "))))
    }
}
