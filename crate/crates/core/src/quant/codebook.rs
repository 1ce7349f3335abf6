//! Scalar k-means codebooks with binary16 centroids.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub const MAX_LLOYD_ITERS: usize = 100;
/// Independent seedings tried; the lowest final SSE wins.
pub const RESTARTS: usize = 8;
pub const REL_SSE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Vec<f16>,
    /// Centroid index per weight.
    pub assignments: Vec<u16>,
    /// `k` as requested; `centroids.len()` is smaller when the data had fewer
    /// distinct values.
    pub requested_k: usize,
    /// Whether centroid 0 is pinned to exactly zero.
    pub zero_pinned: bool,
    /// Reconstruction SSE after every Lloyd iteration (f64 centroids).
    #[serde(skip)]
    pub sse_history: Vec<f64>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Bits needed for one assignment index.
    pub fn index_bits(&self) -> u32 {
        index_bits(self.k())
    }

    pub fn decode(&self) -> Vec<f32> {
        self.assignments.iter().map(|&a| self.centroids[a as usize].to_f32()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.is_empty() {
            return Err(config_err!("codebook has no centroids"));
        }
        if let Some(a) = self.assignments.iter().find(|&&a| a as usize >= self.k()) {
            return Err(config_err!("codebook assignment {a} out of range for k = {}", self.k()));
        }
        Ok(())
    }

    /// Payload in bits: one index per weight plus a 16-bit centroid table.
    pub fn payload_bits(&self) -> usize {
        self.assignments.len() * self.index_bits() as usize + self.k() * 16
    }
}

pub fn index_bits(k: usize) -> u32 {
    if k <= 1 {
        1
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

fn nearest(centroids: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, &c) in centroids.iter().enumerate().skip(1) {
        if (x - c).abs() < (x - centroids[best]).abs() {
            best = i;
        }
    }
    best
}

fn sse(w: &[f64], centroids: &[f64], assign: &[usize]) -> f64 {
    w.iter().zip(assign).map(|(&x, &a)| (x - centroids[a]).powi(2)).sum()
}

/// One k-means++ seeding followed by Lloyd iterations. Returns the centroids
/// and the SSE after every iteration.
fn lloyd(w: &[f64], distinct: &[f64], k_eff: usize, pin_zero: bool, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut centroids: Vec<f64> = Vec::with_capacity(k_eff);
    centroids.push(if pin_zero { 0.0 } else { w[rng.random_range(0..w.len())] });
    while centroids.len() < k_eff {
        let d: Vec<f64> = distinct
            .iter()
            .map(|&x| centroids.iter().map(|c| (x - c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let mut t = rng.random_range(0.0..total);
        let mut pick = d.iter().rposition(|&v| v > 0.0).expect("a distinct value is uncovered");
        for (i, &di) in d.iter().enumerate() {
            if di > 0.0 && t < di {
                pick = i;
                break;
            }
            t -= di;
        }
        centroids.push(distinct[pick]);
    }

    let mut assign: Vec<usize> = w.iter().map(|&x| nearest(&centroids, x)).collect();
    let mut history = vec![sse(w, &centroids, &assign)];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sum = vec![0.0; k_eff];
        let mut count = vec![0usize; k_eff];
        for (&x, &a) in w.iter().zip(&assign) {
            sum[a] += x;
            count[a] += 1;
        }
        for c in 0..k_eff {
            if count[c] > 0 && !(pin_zero && c == 0) {
                centroids[c] = sum[c] / count[c] as f64;
            }
        }
        assign = w.iter().map(|&x| nearest(&centroids, x)).collect();
        let cur = sse(w, &centroids, &assign);
        let prev = *history.last().expect("non-empty");
        history.push(cur);
        if prev - cur <= REL_SSE_TOL * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    (centroids, history)
}

/// Lloyd's k-means over scalar weights with k-means++ seeding, best of
/// [`RESTARTS`] seedings. With
/// `pin_zero`, centroid 0 is fixed at exactly zero so zero weights decode to
/// zero.
pub fn build_codebook(w: &[f64], k: usize, seed: u64, pin_zero: bool) -> Result<Codebook> {
    if w.is_empty() {
        return Err(config_err!("cannot build a codebook for an empty weight set"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(config_err!("cannot build a codebook for non-finite weights"));
    }
    if k == 0 || k > u16::MAX as usize + 1 {
        return Err(config_err!("codebook size must be in 1..=65536, got {k}"));
    }
    let mut distinct = w.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if pin_zero && distinct.binary_search_by(|v| v.total_cmp(&0.0)).is_err() {
        distinct.push(0.0);
    }
    let k_eff = k.min(distinct.len());
    if k_eff < k {
        log::info!("codebook size reduced from {k} to {k_eff} distinct values");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (centroids, history) = (0..RESTARTS)
        .map(|_| lloyd(w, &distinct, k_eff, pin_zero, &mut rng))
        .min_by(|a, b| a.1.last().expect("non-empty").total_cmp(b.1.last().expect("non-empty")))
        .expect("at least one restart");

    // Store centroids at half precision and reassign against the stored
    // values so decoding is exactly nearest-centroid.
    let stored: Vec<f16> = centroids.iter().map(|&c| f16::from_f64(c)).collect();
    let decoded: Vec<f64> = stored.iter().map(|c| c.to_f64()).collect();
    let assignments = w.iter().map(|&x| nearest(&decoded, x) as u16).collect();
    Ok(Codebook {
        centroids: stored,
        assignments,
        requested_k: k,
        zero_pinned: pin_zero,
        sse_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values_two_centroids() {
        let w = [0.5, -1.25, 0.5, 0.5, -1.25];
        let cb = build_codebook(&w, 2, 1, false).unwrap();
        let d = cb.decode();
        assert!(w.iter().zip(&d).all(|(&a, &b)| a as f32 == b));
    }

    #[test]
    fn single_centroid_is_the_mean() {
        let w = [1.0, 2.0, 3.0, 6.0];
        let cb = build_codebook(&w, 1, 1, false).unwrap();
        assert_eq!(cb.centroids, vec![f16::from_f64(3.0)]);
    }

    #[test]
    fn k_reduced_to_distinct_count() {
        let cb = build_codebook(&[1.0, 1.0, 2.0], 16, 0, false).unwrap();
        assert_eq!((cb.k(), cb.requested_k), (2, 16));
    }

    #[test]
    fn pinned_zero_survives() {
        let w = [0.0, 0.0, 0.01, 0.9, -0.7, 0.3];
        let cb = build_codebook(&w, 3, 4, true).unwrap();
        assert_eq!(cb.centroids[0].to_f64(), 0.0);
        let d = cb.decode();
        assert_eq!((d[0], d[1]), (0.0, 0.0));
    }

    #[test]
    fn payload_arithmetic() {
        let w: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let cb = build_codebook(&w, 16, 0, false).unwrap();
        assert_eq!(cb.index_bits(), 4);
        assert_eq!(cb.payload_bits(), 100 * 4 + 16 * 16);
        assert_eq!(index_bits(2), 1);
        assert_eq!(index_bits(17), 5);
    }
}
