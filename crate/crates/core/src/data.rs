//! Dataset ingestion and synthesis.
//!
//! MNIST comes from the IDX files (`train-images-idx3-ubyte` etc.), CIFAR-10
//! from its 3073-byte binary records. Both are bit-exact readers of the
//! published formats. The spheres dataset is generated from the repo PRNG.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::mean_std;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;

/// MNIST label for threes after [`filter_three_seven`].
pub const THREE: usize = 1;
/// MNIST label for sevens after [`filter_three_seven`].
pub const SEVEN: usize = 0;

/// Labelled examples stored as one flat row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Shape of one example, e.g. `[28, 28, 1]` or `[2]`.
    pub sample_shape: Vec<usize>,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub pixel_range: (f64, f64),
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        images: Vec<f32>,
        labels: Vec<usize>,
        pixel_range: (f64, f64),
        class_count: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "dataset: {} values for {} examples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Dataset { sample_shape, images, labels, pixel_range, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// Examples `indices` as a `[batch, ...sample_shape]` tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("example {i} out of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(&shape, data)?, labels))
    }

    /// Contiguous batches of at most `size` examples, in order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            self.batch(&idx)
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.sample_len();
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            images,
            labels,
            pixel_range: self.pixel_range,
            class_count: self.class_count,
        }
    }

    pub fn first(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an IDX3 image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("magic mismatch: expected {IDX_IMAGES_MAGIC:#010x} (images), found {magic:#010x}"),
        ));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let need = n * rows * cols;
    if bytes.len() - 16 < need {
        return Err(Error::format(path, format!("truncated payload: need {need} pixel bytes, have {}", bytes.len() - 16)));
    }
    Ok((n, rows, cols, bytes[16..16 + need].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("magic mismatch: expected {IDX_LABELS_MAGIC:#010x} (labels), found {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 < n {
        return Err(Error::format(path, format!("truncated payload: need {n} label bytes, have {}", bytes.len() - 8)));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(ip)?, ip)?;
    let labels = parse_idx_labels(&read_file(lp)?, lp)?;
    if labels.len() != n {
        return Err(Error::format(lp, format!("count mismatch: {n} images but {} labels", labels.len())));
    }
    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(vec![rows, cols, 1], images, labels, (0.0, 1.0), class_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(images, labels)
}

/// Keeps digits 3 and 7, relabelled three -> [`THREE`], seven -> [`SEVEN`].
pub fn filter_three_seven(d: &Dataset) -> Dataset {
    let keep: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == 3 || d.labels[i] == 7).collect();
    let mut out = d.subset(&keep);
    for l in &mut out.labels {
        *l = if *l == 3 { THREE } else { SEVEN };
    }
    out.class_count = 2;
    out
}

/// Elementwise mean of all examples labelled `class`.
pub fn average_class_image(d: &Dataset, class: usize) -> Result<Tensor> {
    let per = d.sample_len();
    let mut acc = vec![0.0f64; per];
    let mut count = 0usize;
    for i in (0..d.len()).filter(|&i| d.labels[i] == class) {
        for (a, &v) in acc.iter_mut().zip(d.image(i)) {
            *a += v as f64;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::ClassAbsent(class));
    }
    let data = acc.into_iter().map(|a| (a / count as f64) as f32).collect();
    Tensor::new(&d.sample_shape, data)
}

/// `(x - mean) / max(std, 1/sqrt(n))` for a single image.
pub fn per_image_standardize(x: &Tensor) -> Tensor {
    let (mean, std) = mean_std(x.data());
    let s = std.max(1.0 / (x.len() as f32).sqrt());
    x.map(|v| (v - mean) / s)
}

/// Loads a CIFAR-10 binary batch; pixels stay in `[0, 255]`, reordered CHW -> HWC.
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_cifar10(&read_file(path)?, path)
}

pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::format(
            path,
            format!("length {} is not a positive multiple of {CIFAR_RECORD_LEN}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD_LEN) {
        labels.push(rec[0] as usize);
        let px = &rec[1..];
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    images.push(px[c * 1024 + y * 32 + x] as f32);
                }
            }
        }
    }
    Dataset::new(vec![32, 32, 3], images, labels, (0.0, 255.0), 10)
}

/// Sign pattern of the first two coordinates (`true` = non-negative).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quadrant {
    pub x0_positive: bool,
    pub x1_positive: bool,
}

impl Quadrant {
    pub fn of(x0: f32, x1: f32) -> Self {
        Quadrant { x0_positive: x0 >= 0.0, x1_positive: x1 >= 0.0 }
    }

    /// Parses `"+-"`-style patterns.
    pub fn parse(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        let sign = |c: u8| match c {
            b'+' => Ok(true),
            b'-' => Ok(false),
            _ => Err(Error::InvalidArgument(format!("quadrant {s:?}: expected two of '+'/'-'"))),
        };
        if b.len() != 2 {
            return Err(Error::InvalidArgument(format!("quadrant {s:?}: expected two of '+'/'-'")));
        }
        Ok(Quadrant { x0_positive: sign(b[0])?, x1_positive: sign(b[1])? })
    }

    pub fn label(&self) -> String {
        let c = |p: bool| if p { '+' } else { '-' };
        format!("{}{}", c(self.x0_positive), c(self.x1_positive))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpheresConfig {
    pub dim: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub samples_per_class: usize,
    pub removed_quadrants: Vec<Quadrant>,
    pub seed: u64,
}

impl Default for SpheresConfig {
    fn default() -> Self {
        SpheresConfig {
            dim: 2,
            inner_radius: 1.0,
            outer_radius: 1.3,
            samples_per_class: 5000,
            removed_quadrants: vec![
                Quadrant { x0_positive: true, x1_positive: false },
                Quadrant { x0_positive: false, x1_positive: true },
            ],
            seed: 0,
        }
    }
}

impl SpheresConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!("spheres: dim {} < 2", self.dim)));
        }
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_radius) {
            return Err(Error::InvalidArgument(format!(
                "spheres: radii must satisfy 0 < inner ({}) < outer ({})",
                self.inner_radius, self.outer_radius
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("spheres: samples_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Draws `samples_per_class` points on each sphere (label 0 inner, 1 outer),
/// interleaved by class. The train split drops points in `removed_quadrants`;
/// the test split comes from an independent stream and keeps every quadrant.
pub fn spheres_generate(cfg: &SpheresConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let stream = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = Rng::derived(cfg.seed, stream);
    let mut images = Vec::with_capacity(2 * cfg.samples_per_class * cfg.dim);
    let mut labels = Vec::with_capacity(2 * cfg.samples_per_class);
    let mut point = vec![0.0f64; cfg.dim];
    for _ in 0..cfg.samples_per_class {
        for (label, radius) in [(0usize, cfg.inner_radius), (1, cfg.outer_radius)] {
            let norm = loop {
                point.iter_mut().for_each(|p| *p = rng.normal());
                let norm = point.iter().map(|p| p * p).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break norm;
                }
            };
            let scaled: Vec<f32> = point.iter().map(|p| (p / norm * radius) as f32).collect();
            let removed = split == Split::Train
                && cfg.removed_quadrants.contains(&Quadrant::of(scaled[0], scaled[1]));
            if !removed {
                images.extend_from_slice(&scaled);
                labels.push(label);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let r = cfg.outer_radius;
    Dataset::new(vec![cfg.dim], images, labels, (-r, r), 2)
}
