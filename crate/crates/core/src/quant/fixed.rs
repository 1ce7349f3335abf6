//! Signed fixed-point quantization on a `2^−frac_bits` grid.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointParams {
    pub total_bits: u32,
    pub int_bits: u32,
    pub frac_bits: u32,
    pub mu: f64,
    pub sigma: f64,
}

impl FixedPointParams {
    pub fn new(total_bits: u32, int_bits: u32) -> Result<Self> {
        if !(2..=32).contains(&total_bits) {
            return Err(config_err!("fixed point needs 2..=32 bits, got {total_bits}"));
        }
        if int_bits + 1 > total_bits {
            return Err(config_err!("{int_bits} integer bits do not fit in {total_bits} signed bits"));
        }
        let frac_bits = total_bits - int_bits - 1;
        Ok(FixedPointParams {
            total_bits,
            int_bits,
            frac_bits,
            mu: 0.0,
            sigma: (-(frac_bits as f64)).exp2(),
        })
    }

    /// Representable range `[−2^int_bits, 2^int_bits − σ]`.
    pub fn range(&self) -> (f64, f64) {
        let m = (self.int_bits as f64).exp2();
        (-m, m - self.sigma)
    }

    pub fn quantize(&self, x: f64) -> f64 {
        quantize_fixed(x, self)
    }
}

/// Integer bits for a value set: `⌈log2 max|x|⌉`, floored at zero.
pub fn fit_fixed_point(x: &[f64], total_bits: u32) -> Result<FixedPointParams> {
    if x.is_empty() {
        return Err(config_err!("cannot fit fixed point to an empty set"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(config_err!("cannot fit fixed point to non-finite values"));
    }
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let int_bits = if max > 0.0 { max.log2().ceil().max(0.0) as u32 } else { 0 };
    FixedPointParams::new(total_bits, int_bits)
}

/// `μ + σ·round((x − μ)/σ)`, saturated to the representable range.
pub fn quantize_fixed(x: f64, p: &FixedPointParams) -> f64 {
    let (lo, hi) = p.range();
    let q = p.mu + p.sigma * ((x - p.mu) / p.sigma).round();
    q.clamp(lo, hi)
}

/// Quantizes a slice and counts saturated entries.
pub fn quantize_fixed_slice(xs: &[f64], p: &FixedPointParams) -> (Vec<f64>, usize) {
    let (lo, hi) = p.range();
    let mut saturated = 0;
    let out = xs
        .iter()
        .map(|&x| {
            let q = p.mu + p.sigma * ((x - p.mu) / p.sigma).round();
            if q < lo || q > hi {
                saturated += 1;
            }
            q.clamp(lo, hi)
        })
        .collect();
    (out, saturated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_examples() {
        let p = fit_fixed_point(&[0.2, -1.5, 1.0], 8).unwrap();
        assert_eq!((p.int_bits, p.frac_bits, p.sigma), (1, 6, 1.0 / 64.0));
        let p = fit_fixed_point(&[1.0, -0.5], 8).unwrap();
        assert_eq!((p.int_bits, p.frac_bits), (0, 7));
        let p = fit_fixed_point(&[0.4, 0.1], 8).unwrap();
        assert_eq!((p.int_bits, p.frac_bits), (0, 7));
        let p = fit_fixed_point(&[0.0, 0.0], 8).unwrap();
        assert_eq!(p.int_bits, 0);
        assert!(fit_fixed_point(&[], 8).is_err());
        assert!(fit_fixed_point(&[300.0], 8).is_err());
    }

    #[test]
    fn quantize_examples() {
        let p = FixedPointParams::new(8, 1).unwrap();
        assert_eq!(quantize_fixed(0.0, &p), 0.0);
        assert_eq!(quantize_fixed(0.3, &p), 19.0 / 64.0);
        assert_eq!(quantize_fixed(5.0 / 64.0, &p), 5.0 / 64.0);
        let (q, sat) = quantize_fixed_slice(&[3.0, -3.0, 0.5, 1.99], &p);
        assert_eq!(q, vec![2.0 - 1.0 / 64.0, -2.0, 0.5, 2.0 - 1.0 / 64.0]);
        assert_eq!(sat, 2);
    }
}
