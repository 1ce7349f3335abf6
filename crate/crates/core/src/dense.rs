//! Dense convolution baselines: a direct loop nest and im2col + GEMM.
//!
//! The direct path is the correctness oracle for everything else in the
//! crate. Its accumulation order inside one output element is fixed
//! (input channel, then kernel row, then kernel column), so results do not
//! depend on how output tiles are spread across workers.

use num_traits::Zero;
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::shape::ConvShape;
use crate::tensor::{pad_input, Accum, Element, Tensor4D};

/// Weights (`K×C×R×S`) and bias (`K`) of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerDense<T = f32> {
    pub weights: Tensor4D<T>,
    pub bias: Vec<T>,
    pub shape: ConvShape,
}

impl<T: Element> ConvLayerDense<T> {
    pub fn new(weights: Tensor4D<T>, bias: Vec<T>, shape: ConvShape) -> Result<Self> {
        shape.validate()?;
        if weights.dims() != shape.weight_dims() {
            return Err(shape_err!(
                "weight extents {:?} do not match layer {:?}",
                weights.dims(),
                shape.weight_dims()
            ));
        }
        if bias.len() != shape.out_channels {
            return Err(shape_err!(
                "bias has {} entries for {} output channels",
                bias.len(),
                shape.out_channels
            ));
        }
        Ok(ConvLayerDense {
            weights,
            bias,
            shape,
        })
    }

    /// Layer with zero bias.
    pub fn without_bias(weights: Tensor4D<T>, shape: ConvShape) -> Result<Self> {
        let k = shape.out_channels;
        Self::new(weights, vec![T::zero(); k], shape)
    }
}

/// Geometry of one call, with the actual batch taken from the input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub r: usize,
    pub s: usize,
    pub hp: usize,
    pub wp: usize,
    pub e: usize,
    pub f: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub(crate) fn resolve(shape: &ConvShape, input_dims: [usize; 4]) -> Result<Self> {
        if !shape.accepts_input(input_dims) {
            return Err(shape_err!(
                "input extents {input_dims:?} do not match layer input C×H×W = {}×{}×{}",
                shape.in_channels,
                shape.height,
                shape.width
            ));
        }
        let (e, f) = shape.validate()?;
        Ok(Geometry {
            n: input_dims[0],
            c: shape.in_channels,
            k: shape.out_channels,
            r: shape.kernel_h,
            s: shape.kernel_w,
            hp: shape.padded_height(),
            wp: shape.padded_width(),
            e,
            f,
            stride: shape.stride,
            padding: shape.padding,
        })
    }

    pub(crate) fn image_len(&self) -> usize {
        self.c * self.hp * self.wp
    }

    pub(crate) fn plane_len(&self) -> usize {
        self.e * self.f
    }

    pub(crate) fn output_dims(&self) -> [usize; 4] {
        [self.n, self.k, self.e, self.f]
    }
}

/// Accumulates one weight's contribution into an `E×F` plane of partial sums.
///
/// `base` is the offset of `(c, r, s)` inside the padded input image.
#[inline(always)]
pub(crate) fn accumulate_plane<A: Accum>(acc: &mut [A], w: A, xpad: &[A], base: usize, g: &Geometry) {
    let row_step = g.stride * g.wp;
    for (i, row) in acc.chunks_exact_mut(g.f).enumerate() {
        A::axpy(row, w, &xpad[base + i * row_step..], g.stride);
    }
}

/// Direct convolution: `Out[n,k,i,j] = Σ_{c,r,s} W[k,c,r,s]·I[n,c,i·stride+r,j·stride+s] + b[k]`.
pub fn conv_dense_direct<T: Element>(x: &Tensor4D<T>, layer: &ConvLayerDense<T>) -> Result<Tensor4D<T>> {
    let g = Geometry::resolve(&layer.shape, x.dims())?;
    let xpad = pad_input(x, g.padding);
    let xa = T::widen(xpad.data());
    let wa = T::widen(layer.weights.data());
    let crs = g.c * g.r * g.s;
    let plane = g.plane_len();

    let mut out = vec![T::zero(); g.n * g.k * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(nk, dst)| {
        let (n, k) = (nk / g.k, nk % g.k);
        let mut acc = vec![T::Acc::zero(); plane];
        let filter = &wa[k * crs..(k + 1) * crs];
        let image = n * g.image_len();
        for c in 0..g.c {
            for r in 0..g.r {
                for s in 0..g.s {
                    let w = filter[(c * g.r + r) * g.s + s];
                    let base = image + (c * g.hp + r) * g.wp + s;
                    accumulate_plane(&mut acc, w, &xa, base, &g);
                }
            }
        }
        let b = layer.bias[k].to_acc();
        for (o, a) in dst.iter_mut().zip(&acc) {
            *o = T::from_acc(*a + b);
        }
    });
    Tensor4D::from_vec(g.output_dims(), out)
}

/// Unfolds one padded image (`C×Hp×Wp`) into a `(C·R·S) × (E·F)` row-major matrix.
pub fn im2col<A: Copy>(
    image: &[A],
    shape: &ConvShape,
    cols: &mut [A],
) -> Result<()> {
    let (e, f) = shape.validate()?;
    let (c, r, s) = (shape.in_channels, shape.kernel_h, shape.kernel_w);
    let (hp, wp, stride) = (shape.padded_height(), shape.padded_width(), shape.stride);
    let ef = e * f;
    if image.len() != c * hp * wp || cols.len() != c * r * s * ef {
        return Err(shape_err!("im2col buffer sizes do not match {shape:?}"));
    }
    for ci in 0..c {
        for ri in 0..r {
            for si in 0..s {
                let row = &mut cols[((ci * r + ri) * s + si) * ef..][..ef];
                for i in 0..e {
                    let src = (ci * hp + i * stride + ri) * wp + si;
                    for j in 0..f {
                        row[i * f + j] = image[src + j * stride];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a padded image.
pub fn col2im<A: Accum>(cols: &[A], shape: &ConvShape, image: &mut [A]) -> Result<()> {
    let (e, f) = shape.validate()?;
    let (c, r, s) = (shape.in_channels, shape.kernel_h, shape.kernel_w);
    let (hp, wp, stride) = (shape.padded_height(), shape.padded_width(), shape.stride);
    let ef = e * f;
    if image.len() != c * hp * wp || cols.len() != c * r * s * ef {
        return Err(shape_err!("col2im buffer sizes do not match {shape:?}"));
    }
    for ci in 0..c {
        for ri in 0..r {
            for si in 0..s {
                let row = &cols[((ci * r + ri) * s + si) * ef..][..ef];
                for i in 0..e {
                    let dst = (ci * hp + i * stride + ri) * wp + si;
                    for j in 0..f {
                        let v = &mut image[dst + j * stride];
                        *v = *v + row[i * f + j];
                    }
                }
            }
        }
    }
    Ok(())
}

/// im2col followed by a `K × (C·R·S) × (E·F)` matrix multiply per image.
pub fn conv_dense_gemm<T: Element>(x: &Tensor4D<T>, layer: &ConvLayerDense<T>) -> Result<Tensor4D<T>> {
    let g = Geometry::resolve(&layer.shape, x.dims())?;
    let xpad = pad_input(x, g.padding);
    let xa = T::widen(xpad.data());
    let wa = T::widen(layer.weights.data());
    let crs = g.c * g.r * g.s;
    let plane = g.plane_len();
    let image_shape = layer.shape.with_batch(1);

    let mut out = vec![T::zero(); g.n * g.k * plane];
    out.par_chunks_mut(g.k * plane)
        .enumerate()
        .try_for_each(|(n, dst)| -> Result<()> {
            let image = &xa[n * g.image_len()..(n + 1) * g.image_len()];
            let mut cols = vec![T::Acc::zero(); crs * plane];
            im2col(image, &image_shape, &mut cols)?;
            let mut prod = vec![T::Acc::zero(); g.k * plane];
            T::Acc::gemm(g.k, crs, plane, &wa, &cols, &mut prod);
            for (k, (o, p)) in dst.chunks_mut(plane).zip(prod.chunks(plane)).enumerate() {
                let b = layer.bias[k].to_acc();
                for (o, &v) in o.iter_mut().zip(p) {
                    *o = T::from_acc(v + b);
                }
            }
            Ok(())
        })?;
    Tensor4D::from_vec(g.output_dims(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rel_error;
    use half::f16;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4D<f32> {
        Tensor4D::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Independent f64 oracle: bounds-checked loops, no padding buffer.
    fn oracle(x: &Tensor4D<f32>, layer: &ConvLayerDense<f32>) -> Vec<f64> {
        let s = layer.shape;
        let (e, f) = s.validate().unwrap();
        let n = x.dims()[0];
        let mut out = Vec::new();
        for ni in 0..n {
            for k in 0..s.out_channels {
                for i in 0..e {
                    for j in 0..f {
                        let mut acc = layer.bias[k] as f64;
                        for c in 0..s.in_channels {
                            for r in 0..s.kernel_h {
                                for t in 0..s.kernel_w {
                                    let h = (i * s.stride + r) as isize - s.padding as isize;
                                    let w = (j * s.stride + t) as isize - s.padding as isize;
                                    if h < 0 || w < 0 || h >= s.height as isize || w >= s.width as isize {
                                        continue;
                                    }
                                    acc += layer.weights.get(k, c, r, t) as f64
                                        * x.get(ni, c, h as usize, w as usize) as f64;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    fn rel64(a: &[f32], b: &[f64]) -> f64 {
        let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        max_rel_error(&a, b)
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor([2, 1, 5, 5], &mut rng);
        let shape = ConvShape::chwk(1, 5, 5, 1, 1, 0).with_batch(2);
        let layer = ConvLayerDense::without_bias(Tensor4D::filled([1, 1, 1, 1], 1.0), shape).unwrap();
        assert_eq!(conv_dense_direct(&x, &layer).unwrap(), x);
        assert_eq!(conv_dense_gemm(&x, &layer).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor([1, 3, 6, 6], &mut rng);
        let shape = ConvShape::chwk(3, 6, 6, 2, 3, 1);
        let layer = ConvLayerDense::new(Tensor4D::zeros(shape.weight_dims()), vec![0.5, -2.0], shape).unwrap();
        let y = conv_dense_direct(&x, &layer).unwrap();
        for k in 0..2 {
            assert!(y.plane(0, k).iter().all(|&v| v == layer.bias[k]));
        }
    }

    #[test]
    fn direct_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = ConvShape::chwk(3, 8, 8, 4, 3, 1).with_batch(2);
        let x = random_tensor(shape.input_dims(), &mut rng);
        let w = random_tensor(shape.weight_dims(), &mut rng);
        let layer = ConvLayerDense::new(w, vec![0.1, 0.2, -0.3, 0.0], shape).unwrap();
        let y = conv_dense_direct(&x, &layer).unwrap();
        assert_eq!(y.dims(), [2, 4, 8, 8]);
        assert!(rel64(y.data(), &oracle(&x, &layer)) < 1e-5);
    }

    #[test]
    fn gemm_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (shape, label) in [
            (ConvShape::chwk(3, 8, 8, 4, 3, 1).with_batch(2), "3x3"),
            (ConvShape::chwk(64, 6, 6, 256, 1, 0), "1x1 K=256 C=64"),
            (ConvShape::chwk(2, 9, 9, 3, 3, 1).with_stride(2), "strided"),
        ] {
            let x = random_tensor(shape.input_dims(), &mut rng);
            let w = random_tensor(shape.weight_dims(), &mut rng);
            let layer = ConvLayerDense::without_bias(w, shape).unwrap();
            let a = conv_dense_direct(&x, &layer).unwrap();
            let b = conv_dense_gemm(&x, &layer).unwrap();
            assert!(max_rel_error(b.data(), a.data()) < 1e-4, "{label}");
            assert!(rel64(a.data(), &oracle(&x, &layer)) < 1e-5, "{label}");
        }
    }

    #[test]
    fn f16_profile_tracks_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = ConvShape::chwk(4, 7, 7, 3, 3, 1);
        let x = random_tensor(shape.input_dims(), &mut rng).cast::<f16>();
        let w = random_tensor(shape.weight_dims(), &mut rng).cast::<f16>();
        let layer = ConvLayerDense::without_bias(w, shape).unwrap();
        let direct = conv_dense_direct(&x, &layer).unwrap();
        let gemm = conv_dense_gemm(&x, &layer).unwrap();
        assert!(max_rel_error(gemm.data(), direct.data()) < 1e-2);

        let layer32 = ConvLayerDense::without_bias(layer.weights.cast::<f32>(), shape).unwrap();
        let reference = conv_dense_direct(&x.cast::<f32>(), &layer32).unwrap();
        assert!(max_rel_error(direct.cast::<f32>().data(), reference.data()) < 1e-2);
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = ConvShape::chwk(3, 6, 6, 2, 3, 1);
        let x = random_tensor(shape.input_dims(), &mut rng);
        let layer = ConvLayerDense::without_bias(random_tensor(shape.weight_dims(), &mut rng), shape).unwrap();
        let y = conv_dense_direct(&x, &layer).unwrap();
        let y3 = conv_dense_direct(&x.map(|v| 3.0 * v), &layer).unwrap();
        assert!(max_rel_error(y3.data(), y.map(|v| 3.0 * v).data()) < 1e-6);
    }

    #[test]
    fn rejects_mismatched_input() {
        let shape = ConvShape::chwk(3, 6, 6, 2, 3, 1);
        let layer = ConvLayerDense::without_bias(Tensor4D::<f32>::zeros(shape.weight_dims()), shape).unwrap();
        let x = Tensor4D::<f32>::zeros([1, 2, 6, 6]);
        assert!(conv_dense_direct(&x, &layer).is_err());
        assert!(conv_dense_gemm(&x, &layer).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = ConvShape::chwk(2, 5, 5, 1, 3, 1).with_stride(2);
        let (e, f) = shape.validate().unwrap();
        let img: Vec<f64> = (0..2 * 7 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..2 * 9 * e * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&img, &shape, &mut cols).unwrap();
        let mut back = vec![0.0; img.len()];
        col2im(&y, &shape, &mut back).unwrap();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
