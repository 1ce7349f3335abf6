//! Small trainable CNN used by the pruning lab.
//!
//! Architecture: a stack of convolutions, each followed by ReLU, then global
//! average pooling, one fully connected layer and softmax cross-entropy.
//! Everything is `f64` so the analytic gradients can be checked against
//! central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dense::{col2im, im2col};
use crate::error::{config_err, Error, Result};
use crate::shape::ConvShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

fn one() -> usize {
    1
}

/// Network topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    pub classes: usize,
}

impl NetSpec {
    /// Two 3×3 convolutions; the smallest net the gradient checks use.
    pub fn two_conv(input: [usize; 3], classes: usize) -> Self {
        NetSpec {
            input,
            convs: vec![
                ConvSpec { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
                ConvSpec { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            ],
            classes,
        }
    }

    /// Per-layer convolution shapes (batch 1).
    pub fn conv_shapes(&self) -> Result<Vec<ConvShape>> {
        if self.convs.is_empty() {
            return Err(config_err!("network needs at least one convolution"));
        }
        if self.classes < 2 {
            return Err(config_err!("network needs at least two classes"));
        }
        let [mut c, mut h, mut w] = self.input;
        let mut shapes = Vec::with_capacity(self.convs.len());
        for spec in &self.convs {
            let shape = ConvShape {
                batch: 1,
                in_channels: c,
                height: h,
                width: w,
                out_channels: spec.out_channels,
                kernel_h: spec.kernel,
                kernel_w: spec.kernel,
                stride: spec.stride,
                padding: spec.padding,
            };
            let (e, f) = shape.validate()?;
            shapes.push(shape);
            (c, h, w) = (spec.out_channels, e, f);
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub shape: ConvShape,
    /// `K×C×R×S`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `true` where the weight is kept.
    pub mask: Vec<bool>,
}

impl ConvParams {
    pub fn sparsity(&self) -> f64 {
        self.mask.iter().filter(|&&m| !m).count() as f64 / self.mask.len() as f64
    }

    /// Zeroes masked weights (canonical `+0.0`).
    pub fn apply_mask(&mut self) {
        for (w, &m) in self.weights.iter_mut().zip(&self.mask) {
            if !m {
                *w = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub spec: NetSpec,
    pub convs: Vec<ConvParams>,
    /// `classes × features`, row-major.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// Gradients laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub convs: Vec<(Vec<f64>, Vec<f64>)>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// Exponential moving average of `|∂L/∂w|` for every conv weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub decay: f64,
    pub ema: Vec<Vec<f64>>,
}

impl GradStats {
    pub fn new(net: &ToyNet) -> Self {
        GradStats {
            decay: 0.9,
            ema: net.convs.iter().map(|c| vec![0.0; c.weights.len()]).collect(),
        }
    }

    fn update(&mut self, grads: &Grads) {
        let d = self.decay;
        for (ema, (gw, _)) in self.ema.iter_mut().zip(&grads.convs) {
            for (e, g) in ema.iter_mut().zip(gw) {
                *e = d * *e + (1.0 - d) * g.abs();
            }
        }
    }
}

struct Cache {
    cols: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    feat: Vec<f64>,
}

/// `c (m×n) [+]= op(a) · op(b)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: index bounds asserted above for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

fn pad_image(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (hp, wp, p) = (s.padded_height(), s.padded_width(), s.padding);
    if p == 0 {
        return x.to_vec();
    }
    let mut out = vec![0.0; s.in_channels * hp * wp];
    for c in 0..s.in_channels {
        for h in 0..s.height {
            let src = (c * s.height + h) * s.width;
            let dst = (c * hp + h + p) * wp + p;
            out[dst..dst + s.width].copy_from_slice(&x[src..src + s.width]);
        }
    }
    out
}

fn unpad_image(xp: &[f64], s: &ConvShape) -> Vec<f64> {
    let (hp, wp, p) = (s.padded_height(), s.padded_width(), s.padding);
    if p == 0 {
        return xp.to_vec();
    }
    let mut out = vec![0.0; s.in_channels * s.height * s.width];
    for c in 0..s.in_channels {
        for h in 0..s.height {
            let dst = (c * s.height + h) * s.width;
            let src = (c * hp + h + p) * wp + p;
            out[dst..dst + s.width].copy_from_slice(&xp[src..src + s.width]);
        }
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl ToyNet {
    /// He-initialized network with all masks open.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        let shapes = spec.conv_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let fan_in = shape.filter_volume() as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let n = shape.out_channels * shape.filter_volume();
            convs.push(ConvParams {
                shape,
                weights: (0..n).map(|_| normal.sample(&mut rng)).collect(),
                bias: vec![0.0; shape.out_channels],
                mask: vec![true; n],
            });
        }
        let features = convs.last().expect("non-empty").shape.out_channels;
        let normal = Normal::new(0.0, (1.0 / features as f64).sqrt()).expect("positive std");
        let head_w = (0..spec.classes * features).map(|_| normal.sample(&mut rng)).collect();
        Ok(ToyNet {
            head_b: vec![0.0; spec.classes],
            spec,
            convs,
            head_w,
        })
    }

    pub fn features(&self) -> usize {
        self.convs.last().map(|c| c.shape.out_channels).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.weights.len() + c.bias.len()).sum::<usize>()
            + self.head_w.len()
            + self.head_b.len()
    }

    /// Zero-weight fraction over all conv weights, counted by mask.
    pub fn weighted_sparsity(&self) -> f64 {
        let total: usize = self.convs.iter().map(|c| c.mask.len()).sum();
        let pruned: usize = self
            .convs
            .iter()
            .map(|c| c.mask.iter().filter(|&&m| !m).count())
            .sum();
        pruned as f64 / total as f64
    }

    pub fn layer_sparsities(&self) -> Vec<f64> {
        self.convs.iter().map(ConvParams::sparsity).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let want: usize = self.spec.input.iter().product();
        if x.len() != want {
            return Err(config_err!("image has {} values, network expects {want}", x.len()));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Cache) {
        let mut a = x.to_vec();
        let mut cache = Cache {
            cols: Vec::with_capacity(self.convs.len()),
            pre: Vec::with_capacity(self.convs.len()),
            feat: Vec::new(),
        };
        for layer in &self.convs {
            let s = &layer.shape;
            let (e, f) = s.validate().expect("validated at construction");
            let ef = e * f;
            let crs = s.filter_volume();
            let xp = pad_image(&a, s);
            let mut cols = vec![0.0; crs * ef];
            im2col(&xp, s, &mut cols).expect("shapes fixed at construction");
            let mut z = vec![0.0; s.out_channels * ef];
            gemm(s.out_channels, crs, ef, &layer.weights, (crs, 1), &cols, (ef, 1), &mut z, false);
            for (k, plane) in z.chunks_mut(ef).enumerate() {
                plane.iter_mut().for_each(|v| *v += layer.bias[k]);
            }
            a = z.iter().map(|&v| v.max(0.0)).collect();
            cache.cols.push(cols);
            cache.pre.push(z);
        }
        let k = self.features();
        let ef = a.len() / k;
        let feat: Vec<f64> = a.chunks(ef).map(|p| p.iter().sum::<f64>() / ef as f64).collect();
        let logits: Vec<f64> = (0..self.spec.classes)
            .map(|o| {
                self.head_b[o]
                    + self.head_w[o * k..(o + 1) * k]
                        .iter()
                        .zip(&feat)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect();
        cache.feat = feat;
        (logits, cache)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let l = self.logits(x)?;
        Ok(argmax(&l))
    }

    /// Mean cross-entropy over the given samples.
    pub fn loss(&self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for &i in indices {
            let (logits, _) = self.forward_cached(data.image(i));
            total -= softmax(&logits)[data.labels[i]].ln();
        }
        Ok(total / indices.len() as f64)
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, data: &Dataset, indices: &[usize]) -> Result<(f64, Grads)> {
        if indices.is_empty() {
            return Err(config_err!("empty batch"));
        }
        self.check_input(data.image(indices[0]))?;
        let mut grads = Grads {
            convs: self
                .convs
                .iter()
                .map(|c| (vec![0.0; c.weights.len()], vec![0.0; c.bias.len()]))
                .collect(),
            head_w: vec![0.0; self.head_w.len()],
            head_b: vec![0.0; self.head_b.len()],
        };
        let scale = 1.0 / indices.len() as f64;
        let k = self.features();
        let mut total = 0.0;
        for &i in indices {
            let (logits, cache) = self.forward_cached(data.image(i));
            let mut dlogits = softmax(&logits);
            total -= dlogits[data.labels[i]].ln();
            dlogits[data.labels[i]] -= 1.0;
            dlogits.iter_mut().for_each(|v| *v *= scale);

            let mut dfeat = vec![0.0; k];
            for (o, &dl) in dlogits.iter().enumerate() {
                grads.head_b[o] += dl;
                for j in 0..k {
                    grads.head_w[o * k + j] += dl * cache.feat[j];
                    dfeat[j] += dl * self.head_w[o * k + j];
                }
            }

            let last = &self.convs[self.convs.len() - 1].shape;
            let (e, f) = last.validate().expect("validated");
            let mut da: Vec<f64> = dfeat
                .iter()
                .flat_map(|&d| std::iter::repeat_n(d / (e * f) as f64, e * f))
                .collect();

            for (l, layer) in self.convs.iter().enumerate().rev() {
                let s = &layer.shape;
                let (e, f) = s.validate().expect("validated");
                let (ef, crs) = (e * f, s.filter_volume());
                let dz: Vec<f64> = da
                    .iter()
                    .zip(&cache.pre[l])
                    .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                    .collect();
                let (gw, gb) = &mut grads.convs[l];
                for (kk, plane) in dz.chunks(ef).enumerate() {
                    gb[kk] += plane.iter().sum::<f64>();
                }
                // dW += dz · colsᵀ
                gemm(s.out_channels, ef, crs, &dz, (ef, 1), &cache.cols[l], (1, ef), gw, true);
                if l > 0 {
                    // dcols = Wᵀ · dz
                    let mut dcols = vec![0.0; crs * ef];
                    gemm(crs, s.out_channels, ef, &layer.weights, (1, crs), &dz, (ef, 1), &mut dcols, false);
                    let mut dxp = vec![0.0; s.in_channels * s.padded_height() * s.padded_width()];
                    col2im(&dcols, s, &mut dxp).expect("validated");
                    da = unpad_image(&dxp, s);
                }
            }
        }
        Ok((total * scale, grads))
    }

    /// Classification accuracy over a dataset.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(config_err!("cannot score an empty dataset"));
        }
        self.check_input(data.image(0))?;
        let correct: usize = (0..data.len())
            .into_par_iter()
            .map(|i| usize::from(argmax(&self.forward_cached(data.image(i)).0) == data.labels[i]))
            .sum();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Flat parameter view in a fixed order: per conv weights then bias, then
    /// head weights and head bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.convs {
            out.extend_from_slice(&c.weights);
            out.extend_from_slice(&c.bias);
        }
        out.extend_from_slice(&self.head_w);
        out.extend_from_slice(&self.head_b);
        out
    }

    pub fn set_flat_param(&mut self, mut index: usize, value: f64) {
        for c in &mut self.convs {
            for buf in [&mut c.weights, &mut c.bias] {
                if index < buf.len() {
                    buf[index] = value;
                    return;
                }
                index -= buf.len();
            }
        }
        for buf in [&mut self.head_w, &mut self.head_b] {
            if index < buf.len() {
                buf[index] = value;
                return;
            }
            index -= buf.len();
        }
        panic!("parameter index out of range");
    }
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.head_w);
        out.extend_from_slice(&self.head_b);
        out
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Runs one SGD step per batch. Masked weights receive no update and stay
/// exactly zero. Returns the mean loss over the batches.
pub fn train_batches(
    net: &mut ToyNet,
    data: &Dataset,
    batches: &[Vec<usize>],
    lr: f64,
    stats: &mut GradStats,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches {
        let (loss, grads) = net.loss_and_grads(data, batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss}")));
        }
        total += loss;
        stats.update(&grads);
        for (layer, (gw, gb)) in net.convs.iter_mut().zip(&grads.convs) {
            for ((w, g), &m) in layer.weights.iter_mut().zip(gw).zip(&layer.mask) {
                if m {
                    *w -= lr * g;
                }
            }
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
            debug_assert!(layer
                .weights
                .iter()
                .zip(&layer.mask)
                .all(|(w, &m)| m || *w == 0.0));
        }
        for (w, g) in net.head_w.iter_mut().zip(&grads.head_w) {
            *w -= lr * g;
        }
        for (b, g) in net.head_b.iter_mut().zip(&grads.head_b) {
            *b -= lr * g;
        }
    }
    Ok(if batches.is_empty() { 0.0 } else { total / batches.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;

    fn small_data() -> Dataset {
        SyntheticConfig {
            classes: 3,
            channels: 2,
            height: 6,
            width: 6,
            samples_per_class: 4,
            noise: 0.3,
            seed: 5,
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = small_data();
        let mut net = ToyNet::new(NetSpec::two_conv([2, 6, 6], 3), 1).unwrap();
        let before = net.clone();
        let mut stats = GradStats::new(&net);
        train_batches(&mut net, &data, &[vec![0, 1, 2, 3]], 0.0, &mut stats).unwrap();
        assert_eq!(net.flat_params(), before.flat_params());
        assert!(stats.ema.iter().flatten().any(|&v| v > 0.0));
    }

    #[test]
    fn head_gradient_matches_hand_derivation() {
        // One 1×1 conv (identity, frozen by construction) feeding the head:
        // dL/db_o = p_o − [o = y].
        let spec = NetSpec {
            input: [1, 4, 4],
            convs: vec![ConvSpec { out_channels: 1, kernel: 1, stride: 1, padding: 0 }],
            classes: 2,
        };
        let mut net = ToyNet::new(spec, 3).unwrap();
        net.convs[0].weights = vec![1.0];
        net.head_w = vec![0.5, -0.25];
        net.head_b = vec![0.1, 0.0];
        let data = Dataset {
            dims: [1, 4, 4],
            images: vec![2.0; 16],
            labels: vec![1],
            classes: 2,
        };
        let (_, g) = net.loss_and_grads(&data, &[0]).unwrap();
        // feature = 2, logits = [1.1, -0.5]
        let p1 = 1.0 / (1.0 + (1.1f64 - -0.5).exp());
        let p0 = 1.0 - p1;
        assert!((g.head_b[0] - p0).abs() < 1e-12);
        assert!((g.head_b[1] - (p1 - 1.0)).abs() < 1e-12);
        assert!((g.head_w[0] - p0 * 2.0).abs() < 1e-12);
        // conv weight gradient: dL/dw = Σ_o dL/dlogit_o · head_w[o] · mean(x)
        let dw = (p0 * 0.5 + (p1 - 1.0) * -0.25) * 2.0;
        assert!((g.convs[0].0[0] - dw).abs() < 1e-12);
    }

    #[test]
    fn sgd_step_on_single_weight() {
        let spec = NetSpec {
            input: [1, 4, 4],
            convs: vec![ConvSpec { out_channels: 1, kernel: 1, stride: 1, padding: 0 }],
            classes: 2,
        };
        let mut net = ToyNet::new(spec, 3).unwrap();
        net.convs[0].weights = vec![1.0];
        let data = Dataset { dims: [1, 4, 4], images: vec![1.0; 16], labels: vec![0], classes: 2 };
        let (_, g) = net.loss_and_grads(&data, &[0]).unwrap();
        let mut stats = GradStats::new(&net);
        train_batches(&mut net, &data, &[vec![0]], 0.1, &mut stats).unwrap();
        assert!((net.convs[0].weights[0] - (1.0 - 0.1 * g.convs[0].0[0])).abs() < 1e-15);
        assert!((stats.ema[0][0] - 0.1 * g.convs[0].0[0].abs()).abs() < 1e-15);
    }

    #[test]
    fn masked_weights_never_move() {
        let data = small_data();
        let mut net = ToyNet::new(NetSpec::two_conv([2, 6, 6], 3), 2).unwrap();
        for (i, m) in net.convs[1].mask.iter_mut().enumerate() {
            *m = i % 3 != 0;
        }
        net.convs[1].apply_mask();
        let mut stats = GradStats::new(&net);
        let batches: Vec<Vec<usize>> = vec![(0..6).collect(), (6..12).collect()];
        train_batches(&mut net, &data, &batches, 0.5, &mut stats).unwrap();
        for (w, &m) in net.convs[1].weights.iter().zip(&net.convs[1].mask) {
            assert!(m || w.to_bits() == 0);
        }
    }

    #[test]
    fn nan_loss_is_a_training_error() {
        let data = small_data();
        let mut net = ToyNet::new(NetSpec::two_conv([2, 6, 6], 3), 2).unwrap();
        net.head_b[0] = f64::NAN;
        let mut stats = GradStats::new(&net);
        let r = train_batches(&mut net, &data, &[vec![0, 1]], 0.1, &mut stats);
        assert!(matches!(r, Err(Error::Training(_))));
    }
}
