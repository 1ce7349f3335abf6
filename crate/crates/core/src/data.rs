//! Seeded synthetic image datasets and a CIFAR binary loader.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, format_err, Error, Result};
use crate::tensor::{Element, Tensor4D};

/// Labelled images, row-major `N×C×H×W` in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: [usize; 3],
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Parameters of the synthetic pattern-classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            channels: 3,
            height: 12,
            width: 12,
            samples_per_class: 500,
            noise: 1.5,
            seed: 7,
        }
    }
}

/// Number of distinct pattern families the generator knows.
pub const PATTERN_FAMILIES: usize = 8;

fn pattern(class: usize, y: f64, x: f64, period: f64, phase: f64, cy: f64, cx: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let blob = |py: f64, px: f64| (-((y - py).powi(2) + (x - px).powi(2)) / 4.0).exp();
    match class {
        0 => (tau * y / period + phase).sin(),
        1 => (tau * x / period + phase).sin(),
        2 => (tau * (x + y) / period + phase).sin(),
        3 => 2.0 * blob(cy, cx) - 0.5,
        4 => (tau * x / period + phase).sin() * (tau * y / period + phase).sin() * 1.5,
        5 => (tau * (x - y) / period + phase).sin(),
        6 => {
            let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            (tau * r / period + phase).cos()
        }
        _ => 2.0 * (blob(cy, cx) - blob(cx, cy)),
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > PATTERN_FAMILIES {
            return Err(config_err!(
                "synthetic data supports 2..={PATTERN_FAMILIES} classes, got {}",
                self.classes
            ));
        }
        if self.channels == 0 || self.height < 4 || self.width < 4 || self.samples_per_class == 0 {
            return Err(config_err!("degenerate synthetic dataset {self:?}"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err!("noise must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Generates the dataset; identical configs give identical data.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise).map_err(|e| config_err!("{e}"))?;
        let (c, h, w) = (self.channels, self.height, self.width);
        let total = self.classes * self.samples_per_class;
        let mut images = Vec::with_capacity(total * c * h * w);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let class = i % self.classes;
            let period = rng.random_range(3.0..5.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let cy = rng.random_range(2.0..(h as f64 - 2.0));
            let cx = rng.random_range(2.0..(w as f64 - 2.0));
            for _ in 0..c {
                let gain = rng.random_range(0.5..1.0);
                for y in 0..h {
                    for x in 0..w {
                        let v = gain * pattern(class, y as f64, x as f64, period, phase, cy, cx);
                        images.push(v + noise.sample(&mut rng));
                    }
                }
            }
            labels.push(class);
        }
        Ok(Dataset {
            dims: [c, h, w],
            images,
            labels,
            classes: self.classes,
        })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            dims: self.dims,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Seeded shuffle, then the first `1 − val_fraction` for training and the
    /// rest for validation.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        if !(0.0..1.0).contains(&val_fraction) || n_val == 0 || n_val >= self.len() {
            return Err(config_err!(
                "dataset of {} samples too small for a {val_fraction} validation split",
                self.len()
            ));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (train, val) = idx.split_at(self.len() - n_val);
        Ok((self.subset(train), self.subset(val)))
    }

    /// Shuffled mini-batches of indices covering the dataset once.
    pub fn batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    pub fn to_tensor<T: Element>(&self, indices: &[usize]) -> Tensor4D<T> {
        let [c, h, w] = self.dims;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v)));
        }
        Tensor4D::from_vec([indices.len(), c, h, w], data).expect("extents match")
    }

    pub fn all_tensor<T: Element>(&self) -> Tensor4D<T> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.to_tensor(&idx)
    }
}

/// Reads a CIFAR-10 (`label_bytes = 1`) or CIFAR-100 (`label_bytes = 2`, fine
/// label used) binary batch file. Pixels are scaled to `[0, 1]`.
pub fn load_cifar_bin(path: &Path, label_bytes: usize) -> Result<Dataset> {
    const PIXELS: usize = 3 * 32 * 32;
    if !(1..=2).contains(&label_bytes) {
        return Err(config_err!("CIFAR records carry 1 or 2 label bytes"));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = label_bytes + PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(format_err!(
            "{}: {} bytes is not a whole number of {record}-byte records",
            path.display(),
            bytes.len()
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / record * PIXELS);
    let mut labels = Vec::with_capacity(bytes.len() / record);
    for rec in bytes.chunks_exact(record) {
        labels.push(rec[label_bytes - 1] as usize);
        images.extend(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        dims: [3, 32, 32],
        images,
        labels,
        classes: if label_bytes == 2 { classes.max(100) } else { classes.max(10) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let cfg = SyntheticConfig {
            samples_per_class: 5,
            ..Default::default()
        };
        assert_eq!(cfg.generate().unwrap(), cfg.generate().unwrap());
        let other = SyntheticConfig { seed: 8, ..cfg.clone() };
        assert_ne!(cfg.generate().unwrap().images, other.generate().unwrap().images);
    }

    #[test]
    fn balanced_labels_and_extents() {
        let cfg = SyntheticConfig {
            samples_per_class: 10,
            ..Default::default()
        };
        let d = cfg.generate().unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d.images.len(), 40 * 3 * 12 * 12);
        for class in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == class).count(), 10);
        }
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let d = SyntheticConfig::default().generate().unwrap();
        let (train, val) = d.split(0.2, 1).unwrap();
        assert_eq!(val.len(), 400);
        assert_eq!(train.len() + val.len(), d.len());
        let tiny = d.subset(&[0, 1]);
        assert!(tiny.split(0.2, 1).is_err());
    }

    #[test]
    fn cifar_records_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        bytes.push(7);
        bytes.extend(std::iter::repeat_n(0u8, 3072));
        std::fs::write(&path, &bytes).unwrap();
        let d = load_cifar_bin(&path, 1).unwrap();
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.image(0)[0], 1.0);
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(load_cifar_bin(&path, 1).is_err());
    }
}
