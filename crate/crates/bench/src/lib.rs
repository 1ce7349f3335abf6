//! Fixtures shared by the criterion benches.

use sparseconv_core::harness::{synthetic_input, synthetic_weights};
use sparseconv_core::{build_csr, ConvLayerDense, ConvShape, CsrKernel, Tensor4D};

pub struct Fixture {
    pub shape: ConvShape,
    pub input: Tensor4D<f32>,
    pub dense: ConvLayerDense<f32>,
    pub kernel: CsrKernel<f32>,
}

/// Seeded layer with uniform per-channel sparsity and a batch of inputs.
pub fn fixture(shape: ConvShape, batch: usize, sparsity: f64) -> Fixture {
    let w = synthetic_weights(&shape, sparsity, 1);
    let kernel = build_csr(&w, &shape).expect("valid layer");
    Fixture {
        input: synthetic_input(&shape, batch, 2),
        dense: ConvLayerDense::without_bias(w, shape.with_batch(batch)).expect("valid layer"),
        kernel,
        shape: shape.with_batch(batch),
    }
}

/// Weights where channel `k` keeps a fraction of taps that grows with `k`,
/// the case sparsity unification pads the most.
pub fn skewed_weights(shape: &ConvShape, max_density: f64) -> Tensor4D<f32> {
    let crs = shape.filter_volume();
    let k = shape.out_channels;
    let (r, s) = (shape.kernel_h, shape.kernel_w);
    Tensor4D::from_fn(shape.weight_dims(), |[ch, c, y, x]| {
        let pos = (c * r + y) * s + x;
        let keep = ((ch + 1) as f64 / k as f64 * max_density * crs as f64).round() as usize;
        // Spread kept taps over the filter with a fixed stride.
        if (pos * 7919) % crs < keep {
            ((pos % 13) as f32 - 6.0) / 7.0 + 0.01
        } else {
            0.0
        }
    })
}
