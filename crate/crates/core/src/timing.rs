//! Wall-clock measurement with warm-up discards.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub warmups: usize,
    pub repetitions: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            warmups: 2,
            repetitions: 5,
        }
    }
}

impl TimingConfig {
    pub fn new(warmups: usize, repetitions: usize) -> Self {
        TimingConfig {
            warmups,
            repetitions: repetitions.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub iqr_ms: f64,
    pub min_ms: f64,
    pub repetitions: usize,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty(), "no timing samples");
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        TimingStats {
            median_ms: quantile(&s, 0.5),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            iqr_ms: quantile(&s, 0.75) - quantile(&s, 0.25),
            min_ms: s[0],
            repetitions: s.len(),
        }
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Runs `f` `warmups` times unrecorded, then `repetitions` times timed.
pub fn measure<R>(cfg: TimingConfig, mut f: impl FnMut() -> R) -> TimingStats {
    for _ in 0..cfg.warmups {
        black_box(f());
    }
    let samples: Vec<f64> = (0..cfg.repetitions.max(1))
        .map(|_| {
            let t = Instant::now();
            black_box(f());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    TimingStats::from_samples(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_samples() {
        let s = TimingStats::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.median_ms, 3.0);
        assert_eq!(s.mean_ms, 3.0);
        assert_eq!(s.iqr_ms, 2.0);
        assert_eq!(s.min_ms, 1.0);
        assert_eq!(s.repetitions, 5);
    }

    #[test]
    fn measure_runs_warmups_and_reps() {
        let mut calls = 0;
        let stats = measure(TimingConfig::new(2, 5), || calls += 1);
        assert_eq!(calls, 7);
        assert_eq!(stats.repetitions, 5);
    }
}
