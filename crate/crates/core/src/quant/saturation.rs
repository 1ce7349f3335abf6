//! Histogram-based clipping calibration for activation quantizers.

use serde::{Deserialize, Serialize};

use super::affine::{AffineIntParams, AffineMode};
use crate::error::{config_err, Result};

pub const HISTOGRAM_BINS: usize = 2048;

/// Chosen clipping range together with the histogram it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationPolicy {
    pub histogram: Vec<u64>,
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Fraction of samples inside `[clip_lo, clip_hi]`.
    pub coverage: f64,
    pub mse: f64,
    pub bits: u32,
}

/// Mean squared error of clip-then-quantize on the samples.
pub fn clip_mse(samples: &[f64], lo: f64, hi: f64, bits: u32) -> Result<f64> {
    let p = AffineIntParams::from_range(lo, hi, bits, AffineMode::Asymmetric)?;
    let sum: f64 = samples
        .iter()
        .map(|&x| {
            let q = p.dequantize(p.quantize(x.clamp(lo, hi)));
            (q - x).powi(2)
        })
        .sum();
    Ok(sum / samples.len() as f64)
}

fn histogram(samples: &[f64], lo: f64, hi: f64) -> Vec<u64> {
    let mut h = vec![0u64; HISTOGRAM_BINS];
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for &x in samples {
        let b = if width > 0.0 { ((x - lo) / width) as usize } else { 0 };
        h[b.min(HISTOGRAM_BINS - 1)] += 1;
    }
    h
}

/// Clip bounds that trim `(1 − coverage)/2` of the mass from each tail, at
/// histogram bin edges.
fn trimmed_bounds(h: &[u64], lo: f64, hi: f64, n: usize, coverage: f64) -> (f64, f64) {
    let trim = ((1.0 - coverage) / 2.0 * n as f64).floor() as u64;
    let width = (hi - lo) / h.len() as f64;
    let mut acc = 0;
    let mut first = 0;
    for (i, &c) in h.iter().enumerate() {
        if acc + c > trim {
            first = i;
            break;
        }
        acc += c;
    }
    acc = 0;
    let mut last = h.len() - 1;
    for (i, &c) in h.iter().enumerate().rev() {
        if acc + c > trim {
            last = i;
            break;
        }
        acc += c;
    }
    let clip_lo = if first == 0 { lo } else { lo + first as f64 * width };
    let clip_hi = if last == h.len() - 1 { hi } else { lo + (last + 1) as f64 * width };
    (clip_lo, clip_hi.max(clip_lo))
}

/// Evaluates the unclipped range and one trimmed range per coverage target,
/// and returns the candidate with the lowest quantization MSE (earlier
/// candidates win ties, so no clipping is preferred).
pub fn calibrate_saturation(samples: &[f64], coverage_targets: &[f64], bits: u32) -> Result<SaturationPolicy> {
    if samples.is_empty() {
        return Err(config_err!("saturation calibration needs samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(config_err!("saturation calibration saw non-finite samples"));
    }
    if let Some(c) = coverage_targets.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(config_err!("coverage target {c} outside [0, 1]"));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hist = histogram(samples, lo, hi);

    let mut best = (lo, hi, clip_mse(samples, lo, hi, bits)?);
    for &c in coverage_targets {
        let (clo, chi) = trimmed_bounds(&hist, lo, hi, samples.len(), c);
        let mse = clip_mse(samples, clo, chi, bits)?;
        if mse < best.2 {
            best = (clo, chi, mse);
        }
    }
    let (clip_lo, clip_hi, mse) = best;
    let inside = samples.iter().filter(|&&x| clip_lo <= x && x <= clip_hi).count();
    Ok(SaturationPolicy {
        histogram: hist,
        hist_lo: lo,
        hist_hi: hi,
        clip_lo,
        clip_hi,
        coverage: inside as f64 / samples.len() as f64,
        mse,
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_outliers_keeps_full_range() {
        let s: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let p = calibrate_saturation(&s, &[0.999, 0.9999], 8).unwrap();
        assert_eq!((p.clip_lo, p.clip_hi, p.coverage), (0.0, 1.0, 1.0));
        assert_eq!(p.histogram.iter().sum::<u64>(), 100);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(calibrate_saturation(&[], &[0.999], 8).is_err());
    }
}
