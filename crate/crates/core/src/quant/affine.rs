//! Affine integer quantization, asymmetric or symmetric.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffineMode {
    Asymmetric,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineIntParams {
    pub bits: u32,
    /// Offset: `min(X)` for asymmetric, `0` for symmetric.
    pub mu: f64,
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub mode: AffineMode,
    /// Round codes with `ceil` instead of round-to-nearest.
    #[serde(default)]
    pub ceil_compat: bool,
}

impl AffineIntParams {
    pub fn from_range(min: f64, max: f64, bits: u32, mode: AffineMode) -> Result<Self> {
        if !(2..=32).contains(&bits) {
            return Err(config_err!("affine quantization needs 2..=32 bits, got {bits}"));
        }
        if !(min.is_finite() && max.is_finite() && min <= max) {
            return Err(config_err!("invalid affine range [{min}, {max}]"));
        }
        let (mu, step) = match mode {
            AffineMode::Asymmetric => (min, (max - min) / ((bits as f64).exp2() - 1.0)),
            AffineMode::Symmetric => (0.0, min.abs().max(max.abs()) / ((bits as f64 - 1.0).exp2() - 1.0)),
        };
        Ok(AffineIntParams {
            bits,
            mu,
            min,
            max,
            step: if step > 0.0 { step } else { 1.0 },
            mode,
            ceil_compat: false,
        })
    }

    /// Inclusive code range.
    pub fn code_range(&self) -> (i64, i64) {
        match self.mode {
            AffineMode::Asymmetric => (0, (1i64 << self.bits) - 1),
            AffineMode::Symmetric => {
                let m = (1i64 << (self.bits - 1)) - 1;
                (-m, m)
            }
        }
    }

    /// Code that represents real zero, `round((0 − μ)/step)`.
    pub fn zero_point(&self) -> i64 {
        ((0.0 - self.mu) / self.step).round() as i64
    }

    pub fn quantize(&self, x: f64) -> i64 {
        quantize_affine_int(x, self)
    }

    pub fn dequantize(&self, code: i64) -> f64 {
        self.mu + code as f64 * self.step
    }
}

pub fn fit_affine(x: &[f64], bits: u32, mode: AffineMode) -> Result<AffineIntParams> {
    if x.is_empty() || x.iter().any(|v| !v.is_finite()) {
        return Err(config_err!("affine calibration needs a non-empty finite set"));
    }
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    AffineIntParams::from_range(min, max, bits, mode)
}

pub fn quantize_affine_int(x: f64, p: &AffineIntParams) -> i64 {
    let t = (x - p.mu) / p.step;
    let code = if p.ceil_compat { t.ceil() } else { t.round() };
    let (lo, hi) = p.code_range();
    (code as i64).clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asymmetric_end_points() {
        let p = fit_affine(&[-0.5, 0.25, 1.5], 8, AffineMode::Asymmetric).unwrap();
        assert_eq!(p.quantize(-0.5), 0);
        assert_eq!(p.quantize(1.5), 255);
        assert_eq!(p.quantize(9.0), 255);
        assert_eq!(p.step, 2.0 / 255.0);
    }

    #[test]
    fn symmetric_keeps_zero() {
        let p = fit_affine(&[-2.0, 0.5], 8, AffineMode::Symmetric).unwrap();
        assert_eq!(p.mu, 0.0);
        assert_eq!(p.quantize(0.0), 0);
        assert_eq!(p.dequantize(p.quantize(0.0)), 0.0);
        assert_eq!(p.quantize(-2.0), -127);
    }

    #[test]
    fn degenerate_range() {
        let p = fit_affine(&[0.7, 0.7], 8, AffineMode::Asymmetric).unwrap();
        assert_eq!(p.step, 1.0);
        assert_eq!(p.quantize(0.7), 0);
        assert_eq!(p.dequantize(0), 0.7);
    }

    #[test]
    fn ceil_mode_rounds_up() {
        let mut p = AffineIntParams::from_range(0.0, 255.0, 8, AffineMode::Asymmetric).unwrap();
        assert_eq!(p.quantize(3.2), 3);
        p.ceil_compat = true;
        assert_eq!(p.quantize(3.2), 4);
    }
}
