//! k-bit quantizers for weights, activations and gradients, plus magnitude pruning.
//!
//! Weights use tanh normalization onto `[0, 1]`, a uniform grid of `2^k - 1`
//! steps, and an affine map back to `[-1, 1]`; 1-bit weights are
//! `sign(w) * mean(|w|)`. Activations are clipped to `[0, 1]` before
//! rounding. Gradients are quantized stochastically so the result is
//! unbiased. Rounding ties go toward +inf. `bits == 32` disables a quantizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::sign;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Bit widths for weights, activations and gradients. 32 means full precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub gradient_bits: u32,
    /// Fraction of smallest-magnitude weights zeroed by [`prune`]; 0 disables pruning.
    pub prune_fraction: f64,
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec::full_precision()
    }
}

impl QuantSpec {
    pub const fn full_precision() -> Self {
        QuantSpec { weight_bits: 32, activation_bits: 32, gradient_bits: 32, prune_fraction: 0.0 }
    }

    pub fn new(weight_bits: u32, activation_bits: u32, gradient_bits: u32) -> Result<Self> {
        let spec = QuantSpec { weight_bits, activation_bits, gradient_bits, prune_fraction: 0.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits)?;
        check_bits(self.activation_bits)?;
        check_bits(self.gradient_bits)?;
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(Error::InvalidArgument(format!(
                "prune fraction {} outside [0, 1)",
                self.prune_fraction
            )));
        }
        Ok(())
    }

    /// True when no quantizer is active (pruning aside).
    pub fn is_full_precision(&self) -> bool {
        self.weight_bits == 32 && self.activation_bits == 32 && self.gradient_bits == 32
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (1..=32).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("bit width {bits} outside 1..=32")))
    }
}

/// Round-half-up onto the grid `{0, 1/n, ..., 1}`.
#[inline]
fn round_to_grid<T: Real>(v: T, steps: T) -> T {
    (v * steps + T::from_f64(0.5)).floor() / steps
}

fn steps<T: Real>(bits: u32) -> T {
    T::from_f64(((1u64 << bits) - 1) as f64)
}

pub fn quantize_weights<T: Real>(w: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
    check_bits(bits)?;
    match bits {
        32 => Ok(w.clone()),
        1 => {
            let abs = w.data().iter().map(|v| v.abs());
            let lo = abs.clone().fold(T::infinity(), T::min);
            let hi = abs.clone().fold(T::zero(), T::max);
            let mean = abs.fold(T::zero(), |a, v| a + v) / T::from_f64(w.len() as f64);
            // Clamping undoes summation rounding, so equal magnitudes give back exactly that magnitude.
            let scale = mean.max(lo).min(hi);
            Ok(w.map(|v| sign(v) * scale))
        }
        _ => {
            let n = steps::<T>(bits);
            let max_tanh = w.data().iter().fold(T::zero(), |m, &v| m.max(v.tanh().abs()));
            if max_tanh == T::zero() {
                // All-zero tensor: normalization is undefined; 0 maps to the grid point nearest 0.5.
                let half = T::from_f64(0.5);
                let two = T::from_f64(2.0);
                return Ok(w.map(|_| two * round_to_grid(half, n) - T::one()));
            }
            let half = T::from_f64(0.5);
            let two = T::from_f64(2.0);
            Ok(w.map(|v| {
                let normalized = v.tanh() / (two * max_tanh) + half;
                two * round_to_grid(normalized, n) - T::one()
            }))
        }
    }
}

pub fn quantize_activations<T: Real>(a: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
    check_bits(bits)?;
    if bits == 32 {
        return Ok(a.clone());
    }
    let n = steps::<T>(bits);
    Ok(a.map(|v| round_to_grid(v.max(T::zero()).min(T::one()), n)))
}

/// Stochastic gradient quantizer: scale by `2 max|g|`, shift by 1/2, add
/// uniform noise of one grid step, round, then undo the affine map.
/// The output is an unbiased estimate of `g`.
pub fn quantize_gradients<T: Real>(g: &Tensor<T>, bits: u32, rng: &mut Rng) -> Result<Tensor<T>> {
    check_bits(bits)?;
    let max = g.max_abs();
    if bits == 32 || max == T::zero() {
        return Ok(g.clone());
    }
    let n = steps::<T>(bits);
    let two_max = T::from_f64(2.0) * max;
    let half = T::from_f64(0.5);
    let mut out = g.clone();
    for v in out.data_mut() {
        let noise = T::from_f64(rng.next_f64() - 0.5) / n;
        let scaled = *v / two_max + half + noise;
        let q = (scaled * n + half).floor() / n;
        *v = two_max * (q - half);
    }
    Ok(out)
}

/// Keep-mask (1 kept, 0 pruned) zeroing the `floor(fraction * len)` smallest-|w| entries.
/// Ties are broken by position so the mask is deterministic.
pub fn prune_mask<T: Real>(w: &Tensor<T>, fraction: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("prune fraction {fraction} outside [0, 1)")));
    }
    let count = (fraction * w.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (w.data()[a].abs(), w.data()[b].abs());
        x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut mask = vec![T::one(); w.len()];
    for &i in &order[..count] {
        mask[i] = T::zero();
    }
    Tensor::new(w.shape(), mask)
}

pub fn prune<T: Real>(w: &Tensor<T>, fraction: f64) -> Result<Tensor<T>> {
    let mask = prune_mask(w, fraction)?;
    w.zip_map(&mask, |v, m| v * m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn distinct(t: &Tensor<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = t.data().to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v
    }

    #[test]
    fn bits_out_of_range_rejected() {
        let t = Tensor::<f32>::from_vec(vec![0.1]);
        assert!(quantize_weights(&t, 0).is_err());
        assert!(quantize_weights(&t, 33).is_err());
        assert!(quantize_activations(&t, 0).is_err());
        assert!(quantize_gradients(&t, 40, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn full_precision_passthrough() {
        let t = Tensor::<f32>::from_vec(vec![-3.5, 0.1, 7.25]);
        assert_eq!(quantize_weights(&t, 32).unwrap(), t);
        assert_eq!(quantize_activations(&t, 32).unwrap(), t);
        assert_eq!(quantize_gradients(&t, 32, &mut Rng::new(0)).unwrap(), t);
    }

    #[test]
    fn one_bit_weights_use_mean_magnitude() {
        let t = Tensor::<f64>::from_vec(vec![0.5, -0.25, 0.25]);
        let q = quantize_weights(&t, 1).unwrap();
        let third = 1.0 / 3.0;
        for (got, want) in q.data().iter().zip([third, -third, third]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn two_bit_weights_take_four_levels_and_are_idempotent() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let w = Tensor::from_vec((0..64).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<f64>>());
            let q = quantize_weights(&w, 2).unwrap();
            let levels = distinct(&q);
            // The extreme element always lands on +-1; with 64 uniform draws all four levels appear.
            assert_eq!(levels.len(), 4, "{levels:?}");
            for l in &levels {
                let on_grid = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0].iter().any(|g| (g - l).abs() < 1e-12);
                assert!(on_grid, "{l}");
            }
            assert_eq!(quantize_weights(&q, 2).unwrap(), q);
        }
    }

    #[test]
    fn two_bit_activation_grid() {
        let a = Tensor::<f64>::from_vec(vec![-0.1, 0.4, 0.9, 1.7]);
        let q = quantize_activations(&a, 2).unwrap();
        assert_eq!(q.data(), &[0.0, 1.0 / 3.0, 1.0, 1.0]);
    }

    #[test]
    fn one_bit_activation_tie_rounds_up() {
        let a = Tensor::<f32>::from_vec(vec![0.5, 0.49]);
        assert_eq!(quantize_activations(&a, 1).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_gradient_is_unchanged() {
        let g = Tensor::<f32>::zeros(&[5]);
        for bits in [1, 2, 6, 8] {
            assert_eq!(quantize_gradients(&g, bits, &mut Rng::new(1)).unwrap(), g);
        }
    }

    #[test]
    fn gradient_quantizer_is_unbiased() {
        let mut rng = Rng::new(9);
        let g = Tensor::from_vec((0..16).map(|_| rng.normal()).collect::<Vec<f64>>());
        let draws = 1000;
        let mut sum = vec![0.0; 16];
        let mut sq = vec![0.0; 16];
        for _ in 0..draws {
            let q = quantize_gradients(&g, 6, &mut rng).unwrap();
            for (i, &v) in q.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..16 {
            let mean = sum[i] / draws as f64;
            let var = (sq[i] / draws as f64 - mean * mean).max(1e-30);
            let sigma = (var / draws as f64).sqrt();
            // A single grid step bounds the noise; use it when the sample variance is tiny.
            let step = 2.0 * g.max_abs() / 63.0;
            let tol = 3.0 * sigma.max(step / (12.0f64 * draws as f64).sqrt());
            assert!((mean - g.data()[i]).abs() <= tol, "elem {i}: {mean} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn prune_by_magnitude() {
        let w = Tensor::<f64>::from_vec(vec![3.0, -1.0, 0.5, -4.0]);
        assert_eq!(prune(&w, 0.5).unwrap().data(), &[3.0, 0.0, 0.0, -4.0]);
        assert_eq!(prune(&w, 0.0).unwrap(), w);
        assert!(prune(&w, 1.0).is_err());
    }
}
