//! Accuracy, robustness curves, offset sweeps, decision-boundary probes and
//! image exports.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::attacks::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, ModelConfig, Mode, ParamSet};
use crate::tensor::Tensor;

/// Examples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

/// Fraction of correct predictions.
pub fn accuracy(cfg: &ModelConfig, params: &ParamSet, data: &Dataset) -> Result<f64> {
    perturbed_accuracy(cfg, params, data, |x, _, _| Ok(x.clone()))
}

/// Accuracy after `perturb(batch, labels, first_index)` is applied to each batch.
pub fn perturbed_accuracy(
    cfg: &ModelConfig,
    params: &ParamSet,
    data: &Dataset,
    mut perturb: impl FnMut(&Tensor, &[usize], u64) -> Result<Tensor>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for (b, batch) in data.batches(EVAL_BATCH).enumerate() {
        let (x, labels) = batch?;
        let x = perturb(&x, &labels, (b * EVAL_BATCH) as u64)?;
        let logits = models::forward(cfg, params, &x, Mode::Eval)?;
        hits += models::predictions(cfg, &logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy under a gradient or offset attack.
pub fn attacked_accuracy(cfg: &ModelConfig, params: &ParamSet, data: &Dataset, attack: &AttackConfig) -> Result<f64> {
    perturbed_accuracy(cfg, params, data, |x, labels, first| attacks::perturb(cfg, params, x, labels, attack, first))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessCurve {
    pub epsilons: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub attack: String,
    pub model: String,
}

impl RobustnessCurve {
    /// Trapezoidal area under accuracy vs epsilon.
    pub fn area(&self) -> f64 {
        self.epsilons
            .windows(2)
            .zip(self.accuracies.windows(2))
            .map(|(e, a)| (e[1] - e[0]) * (a[0] + a[1]) / 2.0)
            .sum()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows = self.epsilons.iter().zip(&self.accuracies).map(|(e, a)| vec![e.to_string(), a.to_string()]);
        csv_bytes(&["epsilon", "accuracy"], rows)
    }
}

fn check_sorted(values: &[f64]) -> Result<()> {
    if values.is_empty() || values.windows(2).any(|w| !(w[0] < w[1])) || !(values[0] >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilons must be non-negative and strictly ascending: {values:?}")));
    }
    Ok(())
}

/// Accuracy at each epsilon; the zero entry (if any) is the clean accuracy.
pub fn robustness_curve(
    cfg: &ModelConfig,
    params: &ParamSet,
    data: &Dataset,
    attack: &AttackConfig,
    epsilons: &[f64],
) -> Result<RobustnessCurve> {
    check_sorted(epsilons)?;
    let mut accuracies = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let acc = if eps == 0.0 {
            accuracy(cfg, params, data)?
        } else {
            attacked_accuracy(cfg, params, data, &AttackConfig { epsilon: eps, ..attack.clone() })?
        };
        accuracies.push(acc);
    }
    Ok(RobustnessCurve {
        epsilons: epsilons.to_vec(),
        accuracies,
        attack: attack.kind.name().to_string(),
        model: cfg.kind.name().to_string(),
    })
}

/// Default offset grid `0.05 k` for `k = 0..=20`.
pub fn default_offsets() -> Vec<f64> {
    (0..=20).map(|k| k as f64 * 0.05).collect()
}

/// Accuracy vs constant offset, `(added, subtracted)`.
pub fn offset_sweep(
    cfg: &ModelConfig,
    params: &ParamSet,
    data: &Dataset,
    offsets: &[f64],
) -> Result<(RobustnessCurve, RobustnessCurve)> {
    check_sorted(offsets)?;
    let range = data.pixel_range;
    let mut curves = Vec::new();
    for (name, s) in [("offset_added", 1.0), ("offset_subtracted", -1.0)] {
        let mut accuracies = Vec::with_capacity(offsets.len());
        for &c in offsets {
            let acc = perturbed_accuracy(cfg, params, data, |x, _, _| Ok(attacks::constant_offset(x, s * c, range)))?;
            accuracies.push(acc);
        }
        curves.push(RobustnessCurve {
            epsilons: offsets.to_vec(),
            accuracies,
            attack: name.to_string(),
            model: cfg.kind.name().to_string(),
        });
    }
    let sub = curves.pop().expect("two curves");
    let add = curves.pop().expect("two curves");
    Ok((add, sub))
}

pub fn offset_sweep_csv(added: &RobustnessCurve, subtracted: &RobustnessCurve) -> Result<Vec<u8>> {
    let rows = added
        .epsilons
        .iter()
        .zip(&added.accuracies)
        .zip(&subtracted.accuracies)
        .map(|((c, a), s)| vec![c.to_string(), a.to_string(), s.to_string()]);
    csv_bytes(&["offset", "accuracy_added", "accuracy_subtracted"], rows)
}

/// Axis-aligned box `[x0_lo, x0_hi] x [x1_lo, x1_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    pub x0: (f64, f64),
    pub x1: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub x0: f64,
    pub x1: f64,
    pub class: usize,
    /// Probability of `class`.
    pub probability: f32,
    /// Probability of each class.
    pub probs: [f32; 2],
}

fn require_2d(cfg: &ModelConfig) -> Result<()> {
    if cfg.input_shape != [2] || cfg.class_count != 2 {
        return Err(Error::Architecture(format!(
            "decision-boundary probes need a 2-D, 2-class model, got input {:?}",
            cfg.input_shape
        )));
    }
    Ok(())
}

fn probs_2d(cfg: &ModelConfig, params: &ParamSet, points: Vec<f32>) -> Result<Vec<[f32; 2]>> {
    let n = points.len() / 2;
    let mut out = Vec::with_capacity(n);
    for chunk in points.chunks(2 * EVAL_BATCH) {
        let x = Tensor::new(&[chunk.len() / 2, 2], chunk.to_vec())?;
        let logits = models::forward(cfg, params, &x, Mode::Eval)?;
        out.extend(models::probabilities(cfg, &logits).into_iter().map(|p| [p[0], p[1]]));
    }
    Ok(out)
}

/// Model evaluated on a `resolution x resolution` lattice (row-major, x1 outer).
pub fn boundary_grid(cfg: &ModelConfig, params: &ParamSet, bbox: BoundingBox, resolution: usize) -> Result<Vec<GridPoint>> {
    require_2d(cfg)?;
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!("grid resolution {resolution} must be >= 2")));
    }
    let coord = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let mut coords = Vec::with_capacity(resolution * resolution);
    for j in 0..resolution {
        for i in 0..resolution {
            coords.push((coord(bbox.x0, i), coord(bbox.x1, j)));
        }
    }
    let flat = coords.iter().flat_map(|&(a, b)| [a as f32, b as f32]).collect();
    let probs = probs_2d(cfg, params, flat)?;
    Ok(coords
        .into_iter()
        .zip(probs)
        .map(|((x0, x1), p)| {
            let class = usize::from(p[1] > p[0]);
            GridPoint { x0, x1, class, probability: p[class], probs: p }
        })
        .collect())
}

pub fn boundary_grid_csv(grid: &[GridPoint]) -> Result<Vec<u8>> {
    let rows = grid.iter().map(|g| {
        vec![
            g.x0.to_string(),
            g.x1.to_string(),
            g.class.to_string(),
            g.probability.to_string(),
            g.probs[0].to_string(),
            g.probs[1].to_string(),
        ]
    });
    csv_bytes(&["x0", "x1", "class", "probability", "p_inner", "p_outer"], rows)
}

/// Decision radius along one ray.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayRadius {
    pub angle: f64,
    /// `None` when both ends of the ray get the same class.
    pub radius: Option<f64>,
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusSummary {
    pub count: usize,
    pub no_boundary: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl RadiusSummary {
    pub fn spread(&self) -> f64 {
        self.max - self.min
    }

    fn of<'a>(rays: impl Iterator<Item = &'a RayRadius>) -> Self {
        let mut radii = Vec::new();
        let mut none = 0;
        for r in rays {
            match r.radius {
                Some(v) => radii.push(v),
                None => none += 1,
            }
        }
        let n = radii.len();
        let (mean, min, max) = if n == 0 {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (
                radii.iter().sum::<f64>() / n as f64,
                radii.iter().copied().fold(f64::INFINITY, f64::min),
                radii.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        RadiusSummary { count: n, no_boundary: none, mean, min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryStats {
    pub rays: Vec<RayRadius>,
    pub held_out: RadiusSummary,
    pub trained: RadiusSummary,
}

pub const BISECTION_STEPS: usize = 30;

/// Bisects each ray `r (cos a, sin a)`, `r in [r_lo, r_hi]`, for the point
/// where the outer-class probability crosses 1/2. Angles whose first two
/// coordinates fall in one of `held_out` are summarized separately.
pub fn boundary_radius_stats(
    cfg: &ModelConfig,
    params: &ParamSet,
    angles: &[f64],
    r_lo: f64,
    r_hi: f64,
    held_out: &[crate::data::Quadrant],
) -> Result<BoundaryStats> {
    require_2d(cfg)?;
    if !(0.0..r_hi).contains(&r_lo) {
        return Err(Error::InvalidArgument(format!("need 0 <= r_lo < r_hi, got {r_lo}, {r_hi}")));
    }
    let point = |a: f64, r: f64| [(r * a.cos()) as f32, (r * a.sin()) as f32];
    let outer = |pts: &[[f32; 2]]| -> Result<Vec<bool>> {
        let flat = pts.iter().flatten().copied().collect();
        Ok(probs_2d(cfg, params, flat)?.iter().map(|p| p[1] > p[0]).collect())
    };
    let ends_lo = outer(&angles.iter().map(|&a| point(a, r_lo)).collect::<Vec<_>>())?;
    let ends_hi = outer(&angles.iter().map(|&a| point(a, r_hi)).collect::<Vec<_>>())?;
    let mut lo = vec![r_lo; angles.len()];
    let mut hi = vec![r_hi; angles.len()];
    let active: Vec<usize> = (0..angles.len()).filter(|&i| ends_lo[i] != ends_hi[i]).collect();
    // All rays bisect together: one batched forward pass per iteration.
    for _ in 0..BISECTION_STEPS {
        let mids: Vec<[f32; 2]> = active.iter().map(|&i| point(angles[i], (lo[i] + hi[i]) / 2.0)).collect();
        if mids.is_empty() {
            break;
        }
        let classes = outer(&mids)?;
        for (k, &i) in active.iter().enumerate() {
            let mid = (lo[i] + hi[i]) / 2.0;
            if classes[k] == ends_lo[i] {
                lo[i] = mid;
            } else {
                hi[i] = mid;
            }
        }
    }
    let rays: Vec<RayRadius> = angles
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let p = point(a, 1.0);
            RayRadius {
                angle: a,
                radius: (ends_lo[i] != ends_hi[i]).then(|| (lo[i] + hi[i]) / 2.0),
                held_out: held_out.contains(&crate::data::Quadrant::of(p[0], p[1])),
            }
        })
        .collect();
    let held = RadiusSummary::of(rays.iter().filter(|r| r.held_out));
    let trained = RadiusSummary::of(rays.iter().filter(|r| !r.held_out));
    Ok(BoundaryStats { rays, held_out: held, trained })
}

/// `count` angles evenly covering `[0, 2 pi)`, offset by half a step so none lies on an axis.
pub fn ray_angles(count: usize) -> Vec<f64> {
    let step = std::f64::consts::TAU / count as f64;
    (0..count).map(|i| (i as f64 + 0.5) * step).collect()
}

pub fn boundary_rays_csv(stats: &BoundaryStats) -> Result<Vec<u8>> {
    let rows = stats.rays.iter().map(|r| {
        vec![
            r.angle.to_string(),
            r.radius.map(|v| v.to_string()).unwrap_or_else(|| "no boundary".into()),
            r.held_out.to_string(),
        ]
    });
    csv_bytes(&["angle", "radius", "held_out"], rows)
}

/// Binary PGM (P5) bytes for an 8-bit grayscale image.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("pgm: {} pixels for {width}x{height}", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Symmetric weight visualization: 0 is 128, +max|w| is 255, -max|w| is 0.
pub fn weight_image_pixels(w: &Tensor) -> Vec<u8> {
    let m = w.max_abs() as f64;
    w.data()
        .iter()
        .map(|&v| {
            if m == 0.0 {
                return 128;
            }
            let r = v as f64 / m;
            let scaled = if r >= 0.0 { 128.0 + 127.0 * r } else { 128.0 + 128.0 * r };
            (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Writes a 28x28 weight vector as a symmetric-scaled PGM.
pub fn export_weight_image(w: &Tensor, path: &Path) -> Result<()> {
    if w.len() != 28 * 28 {
        return Err(Error::Shape(format!("weight image needs 784 values, got shape {:?}", w.shape())));
    }
    write_file(path, &pgm_bytes(28, 28, &weight_image_pixels(w))?)
}

/// Image rescaled from `range` to 0..=255 (first channel only for multi-channel inputs).
pub fn image_pgm(image: &Tensor, range: (f64, f64)) -> Result<Vec<u8>> {
    let s = image.shape();
    let (h, w, c) = match s {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        _ => return Err(Error::Shape(format!("pgm export needs HxW or HxWxC, got {s:?}"))),
    };
    let pixels = image
        .data()
        .iter()
        .step_by(c)
        .map(|&v| {
            let t = (v as f64 - range.0) / (range.1 - range.0);
            (t * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect::<Vec<_>>();
    pgm_bytes(w, h, &pixels)
}

pub fn confidences_csv(items: &[attacks::NonExample]) -> Result<Vec<u8>> {
    let rows = items.iter().map(|n| {
        vec![
            n.target.to_string(),
            n.predicted.to_string(),
            n.confidence.to_string(),
            n.target_probability.to_string(),
        ]
    });
    csv_bytes(&["target", "predicted", "confidence", "target_probability"], rows)
}

pub fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
