//! Dense NCHW tensors and the numeric element profiles they can hold.

use std::borrow::Cow;
use std::fmt;

use half::f16;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Storage profile of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    /// IEEE 754 binary16 storage with binary32 accumulation.
    F16,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::F16 => "f16",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::F16 => 2,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" | "float" => Ok(DType::F32),
            "f64" | "double" => Ok(DType::F64),
            "f16" | "half" => Ok(DType::F16),
            other => Err(crate::Error::Config(format!("unknown dtype '{other}'"))),
        }
    }
}

/// Accumulator type used inside convolution kernels.
///
/// `axpy` and `gemm` are the only two hot loops in the crate; every kernel
/// reduces to one of them so that a given output element always sees the same
/// sequence of floating point operations.
pub trait Accum: Float + Default + Send + Sync + fmt::Debug + 'static {
    /// `acc[j] += a * x[j * stride]` for every `j` in `acc`.
    fn axpy(acc: &mut [Self], a: Self, x: &[Self], stride: usize);

    /// Row-major `c = a(m×k) · b(k×n)`, overwriting `c`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// `acc[j] += v * x[o + j]` for every `(v, o)` in `entries`, in order.
    ///
    /// Each output element sees the same sequence of operations as repeated
    /// unit-stride `axpy` calls, but a tile of `acc` stays in registers across
    /// all entries.
    fn gather_axpy(acc: &mut [Self], entries: &[(Self, usize)], x: &[Self]) {
        gather_axpy_generic(acc, entries, x)
    }

    fn to_f64(self) -> f64;
}

const GATHER_TILE: usize = 32;

#[inline(always)]
fn gather_axpy_generic<A: Float>(acc: &mut [A], entries: &[(A, usize)], x: &[A]) {
    let n = acc.len();
    for &(_, o) in entries {
        assert!(o + n <= x.len(), "gather_axpy offset out of range");
    }
    let mut chunks = acc.chunks_exact_mut(GATHER_TILE);
    let mut i = 0;
    for tile in &mut chunks {
        let mut t = [A::zero(); GATHER_TILE];
        t.copy_from_slice(tile);
        for &(v, o) in entries {
            let xs: &[A; GATHER_TILE] = x[o + i..o + i + GATHER_TILE].try_into().unwrap();
            for j in 0..GATHER_TILE {
                t[j] = t[j] + v * xs[j];
            }
        }
        tile.copy_from_slice(&t);
        i += GATHER_TILE;
    }
    let rest = chunks.into_remainder();
    for (j, a) in rest.iter_mut().enumerate() {
        let mut t = *a;
        for &(v, o) in entries {
            t = t + v * x[o + i + j];
        }
        *a = t;
    }
}

#[inline(always)]
fn axpy_generic<A: Float>(acc: &mut [A], a: A, x: &[A], stride: usize) {
    if stride == 1 {
        let x = &x[..acc.len()];
        for (o, &v) in acc.iter_mut().zip(x) {
            *o = *o + a * v;
        }
    } else {
        for (j, o) in acc.iter_mut().enumerate() {
            *o = *o + a * x[j * stride];
        }
    }
}

// Rust never contracts `a * b + c` into a fused multiply-add, so the wide
// versions produce exactly the same bits as the scalar loop.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_f32_avx2(acc: &mut [f32], a: f32, x: &[f32], stride: usize) {
    axpy_generic(acc, a, x, stride)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_f64_avx2(acc: &mut [f64], a: f64, x: &[f64], stride: usize) {
    axpy_generic(acc, a, x, stride)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gather_axpy_f32_avx2(acc: &mut [f32], entries: &[(f32, usize)], x: &[f32]) {
    gather_axpy_generic(acc, entries, x)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gather_axpy_f64_avx2(acc: &mut [f64], entries: &[(f64, usize)], x: &[f64]) {
    gather_axpy_generic(acc, entries, x)
}

impl Accum for f32 {
    #[inline]
    fn axpy(acc: &mut [f32], a: f32, x: &[f32], stride: usize) {
        #[cfg(target_arch = "x86_64")]
        if stride == 1 && std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked above.
            return unsafe { axpy_f32_avx2(acc, a, x, stride) };
        }
        axpy_generic(acc, a, x, stride)
    }

    #[inline]
    fn gather_axpy(acc: &mut [f32], entries: &[(f32, usize)], x: &[f32]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked above.
            return unsafe { gather_axpy_f32_avx2(acc, entries, x) };
        }
        gather_axpy_generic(acc, entries, x)
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: bounds asserted above; strides describe dense row-major buffers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Accum for f64 {
    #[inline]
    fn axpy(acc: &mut [f64], a: f64, x: &[f64], stride: usize) {
        #[cfg(target_arch = "x86_64")]
        if stride == 1 && std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked above.
            return unsafe { axpy_f64_avx2(acc, a, x, stride) };
        }
        axpy_generic(acc, a, x, stride)
    }

    #[inline]
    fn gather_axpy(acc: &mut [f64], entries: &[(f64, usize)], x: &[f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked above.
            return unsafe { gather_axpy_f64_avx2(acc, entries, x) };
        }
        gather_axpy_generic(acc, entries, x)
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: bounds asserted above; strides describe dense row-major buffers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// A tensor element type together with the accumulator it computes in.
pub trait Element: Copy + Default + PartialEq + Send + Sync + fmt::Debug + 'static {
    type Acc: Accum;
    const DTYPE: DType;

    fn to_acc(self) -> Self::Acc;
    fn from_acc(a: Self::Acc) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Numeric zero test; `-0.0` counts as zero.
    fn is_zero(self) -> bool;

    fn zero() -> Self {
        Self::default()
    }

    /// Views a slice in accumulator precision, converting only when the
    /// storage type differs from the accumulator.
    fn widen(xs: &[Self]) -> Cow<'_, [Self::Acc]>;
}

impl Element for f32 {
    type Acc = f32;
    const DTYPE: DType = DType::F32;

    #[inline(always)]
    fn to_acc(self) -> f32 {
        self
    }
    #[inline(always)]
    fn from_acc(a: f32) -> f32 {
        a
    }
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_zero(self) -> bool {
        self == 0.0
    }
    fn widen(xs: &[f32]) -> Cow<'_, [f32]> {
        Cow::Borrowed(xs)
    }
}

impl Element for f64 {
    type Acc = f64;
    const DTYPE: DType = DType::F64;

    #[inline(always)]
    fn to_acc(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_acc(a: f64) -> f64 {
        a
    }
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_zero(self) -> bool {
        self == 0.0
    }
    fn widen(xs: &[f64]) -> Cow<'_, [f64]> {
        Cow::Borrowed(xs)
    }
}

impl Element for f16 {
    type Acc = f32;
    const DTYPE: DType = DType::F16;

    #[inline(always)]
    fn to_acc(self) -> f32 {
        self.to_f32()
    }
    /// Round-to-nearest-even back to binary16.
    #[inline(always)]
    fn from_acc(a: f32) -> f16 {
        f16::from_f32(a)
    }
    fn from_f64(v: f64) -> f16 {
        f16::from_f64(v)
    }
    fn to_f64(self) -> f64 {
        self.to_f64()
    }
    fn is_zero(self) -> bool {
        self.to_bits() & 0x7fff == 0
    }
    fn widen(xs: &[f16]) -> Cow<'_, [f32]> {
        Cow::Owned(xs.iter().map(|v| v.to_f32()).collect())
    }
}

/// Dense 4-D tensor in NCHW layout.
#[derive(Clone, PartialEq)]
pub struct Tensor4D<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4D")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Element> Tensor4D<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4D {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Tensor4D {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(shape_err!(
                "buffer of {} elements does not match extents {dims:?} ({expected})",
                data.len()
            ));
        }
        Ok(Tensor4D { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor4D { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// Elementwise conversion to another profile via `f64`.
    pub fn cast<U: Element>(&self) -> Tensor4D<U> {
        Tensor4D {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4D {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Contiguous `[n, c]` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Sub-tensor holding samples `range` of the batch.
    pub fn batch_slice(&self, range: std::ops::Range<usize>) -> Self {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor4D {
            dims: [range.len(), self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[range.start * per..range.end * per].to_vec(),
        }
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|v| v.is_zero()).count()
    }
}

/// Copies `x` into a zero-bordered buffer of extents `N×C×(H+2p)×(W+2p)`.
pub fn pad_input<T: Element>(x: &Tensor4D<T>, padding: usize) -> Tensor4D<T> {
    if padding == 0 {
        return x.clone();
    }
    let [n, c, h, w] = x.dims();
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let mut out = Tensor4D::zeros([n, c, hp, wp]);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let base = (ni * c + ci) * hp * wp;
            for hi in 0..h {
                let dst = base + (hi + padding) * wp + padding;
                out.data[dst..dst + w].copy_from_slice(&src[hi * w..(hi + 1) * w]);
            }
        }
    }
    out
}

/// Normwise relative error `max|a−b| / max|b|`; `b` is the reference.
///
/// Falls back to the absolute error when the reference is identically zero.
pub fn max_rel_error<T: Element>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared buffers differ in length");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        if x.is_nan() || y.is_nan() {
            return f64::INFINITY;
        }
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_zero_is_identity() {
        let x = Tensor4D::<f32>::from_fn([1, 2, 3, 3], |[_, c, h, w]| (c * 9 + h * 3 + w) as f32);
        assert_eq!(pad_input(&x, 0), x);
    }

    #[test]
    fn pad_single_element() {
        let x = Tensor4D::<f32>::from_vec([1, 1, 1, 1], vec![7.5]).unwrap();
        let p = pad_input(&x, 1);
        assert_eq!(p.dims(), [1, 1, 3, 3]);
        let mut expected = [0.0; 9];
        expected[4] = 7.5;
        assert_eq!(p.data(), &expected[..]);
    }

    #[test]
    fn pad_matches_index_shift() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4D::<f32>::from_fn([2, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
        let p = pad_input(&x, 2);
        assert_eq!(p.dims(), [2, 3, 8, 8]);
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..8 {
                    for w in 0..8 {
                        let inside = (2..6).contains(&h) && (2..6).contains(&w);
                        let want = if inside { x.get(n, c, h - 2, w - 2) } else { 0.0 };
                        assert_eq!(p.get(n, c, h, w), want);
                    }
                }
            }
        }
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4D::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn f16_zero_includes_negative_zero() {
        assert!(f16::from_f32(-0.0).is_zero());
        assert!(!f16::from_f32(1e-7).is_zero() || f16::from_f32(1e-7).to_f32() == 0.0);
    }

    #[test]
    fn axpy_wide_matches_scalar() {
        let x: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut a = vec![0.25f32; 37];
        let mut b = a.clone();
        f32::axpy(&mut a, 1.7, &x, 1);
        axpy_generic(&mut b, 1.7, &x, 1);
        assert_eq!(a, b);
    }
}
