//! Unified-sparsity CSR representation of convolution weights.
//!
//! Every output channel stores exactly `sparse_level` entries. Channels with
//! fewer non-zeros are topped up with explicit zeros ("padding zeros") picked
//! as close as possible to the channel's real non-zeros, so that every work
//! unit of the sparse engine runs the same number of iterations and touches
//! input memory in short contiguous runs.
//!
//! `colidx` holds precomputed offsets into the *padded* input image:
//! `c·Hp·Wp + r·Wp + s`. The engine only adds `n·C·Hp·Wp + i·stride·Wp + j·stride`
//! to it at run time.

use serde::{Deserialize, Serialize};

use crate::error::{format_err, invariant_err, shape_err, Result};
use crate::shape::ConvShape;
use crate::tensor::{Element, Tensor4D};

/// Largest padded image (`C·Hp·Wp`) that 32-bit offsets may address.
pub const MAX_IMAGE_ELEMENTS: usize = i32::MAX as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrKernel<T = f32> {
    values: Vec<T>,
    colidx: Vec<u32>,
    rowptr: Vec<u32>,
    sparse_level: usize,
    shape: ConvShape,
}

/// Zero statistics of a weight tensor, per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub per_channel_nnz: Vec<usize>,
    pub unified_nnz: usize,
    pub padded_zero_count: usize,
    /// Fraction of exact zeros in the whole tensor.
    pub layer_sparsity: f64,
}

impl SparsityReport {
    /// Stored entries after unification divided by the filter volume.
    pub fn unified_density(&self, filter_volume: usize) -> f64 {
        if filter_volume == 0 {
            0.0
        } else {
            self.unified_nnz as f64 / filter_volume as f64
        }
    }
}

/// Counts zeros per output channel of a `K×C×R×S` tensor.
pub fn analyze_sparsity<T: Element>(weights: &Tensor4D<T>) -> Result<SparsityReport> {
    if weights.is_empty() {
        return Err(shape_err!("cannot analyze an empty weight tensor"));
    }
    let k = weights.dims()[0];
    let volume = weights.len() / k;
    let per_channel_nnz: Vec<usize> = weights
        .data()
        .chunks(volume)
        .map(|ch| ch.iter().filter(|v| !v.is_zero()).count())
        .collect();
    let unified_nnz = per_channel_nnz.iter().copied().max().unwrap_or(0);
    let padded_zero_count = per_channel_nnz.iter().map(|&n| unified_nnz - n).sum();
    let zeros = weights.len() - per_channel_nnz.iter().sum::<usize>();
    Ok(SparsityReport {
        per_channel_nnz,
        unified_nnz,
        padded_zero_count,
        layer_sparsity: zeros as f64 / weights.len() as f64,
    })
}

/// Picks `deficit` zero positions of one flattened filter to be stored as
/// explicit entries.
///
/// Zeros are ranked by distance to the nearest real non-zero, then by index,
/// which grows contiguous runs outward from the existing non-zeros. A filter
/// with no non-zeros falls back to the lowest indices. The result is sorted.
pub fn select_padding_zeros<T: Element>(channel: &[T], deficit: usize) -> Result<Vec<usize>> {
    if deficit == 0 {
        return Ok(Vec::new());
    }
    let len = channel.len();
    let mut dist = vec![usize::MAX; len];
    let mut last = None;
    for (i, v) in channel.iter().enumerate() {
        if !v.is_zero() {
            last = Some(i);
        }
        if let Some(l) = last {
            dist[i] = i - l;
        }
    }
    last = None;
    for (i, v) in channel.iter().enumerate().rev() {
        if !v.is_zero() {
            last = Some(i);
        }
        if let Some(l) = last {
            dist[i] = dist[i].min(l - i);
        }
    }
    let mut zeros: Vec<usize> = (0..len).filter(|&i| channel[i].is_zero()).collect();
    if zeros.len() < deficit {
        return Err(invariant_err!(
            "channel has {} zeros, cannot promote {deficit}",
            zeros.len()
        ));
    }
    zeros.sort_by_key(|&i| (dist[i], i));
    zeros.truncate(deficit);
    zeros.sort_unstable();
    Ok(zeros)
}

/// Merges two ascending index lists.
fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] < b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

pub(crate) fn check_addressable(shape: &ConvShape) -> Result<()> {
    let image = shape.in_channels * shape.padded_height() * shape.padded_width();
    if image > MAX_IMAGE_ELEMENTS {
        return Err(shape_err!(
            "padded input image of {image} elements exceeds 32-bit offsets"
        ));
    }
    Ok(())
}

/// Offset of filter element `(c, r, s)` in the padded input image.
#[inline]
pub fn input_offset(shape: &ConvShape, c: usize, r: usize, s: usize) -> u32 {
    ((c * shape.padded_height() + r) * shape.padded_width() + s) as u32
}

/// Compresses dense `K×C×R×S` weights into a unified-sparsity kernel.
pub fn build_csr<T: Element>(weights: &Tensor4D<T>, shape: &ConvShape) -> Result<CsrKernel<T>> {
    build_csr_with_report(weights, shape).map(|(k, _)| k)
}

pub fn build_csr_with_report<T: Element>(
    weights: &Tensor4D<T>,
    shape: &ConvShape,
) -> Result<(CsrKernel<T>, SparsityReport)> {
    shape.validate()?;
    if weights.dims() != shape.weight_dims() {
        return Err(shape_err!(
            "weights {:?} do not match layer {:?}",
            weights.dims(),
            shape.weight_dims()
        ));
    }
    check_addressable(shape)?;
    let report = analyze_sparsity(weights)?;
    let level = report.unified_nnz;
    let (r, s) = (shape.kernel_h, shape.kernel_w);
    let volume = shape.filter_volume();

    let mut values = Vec::with_capacity(level * shape.out_channels);
    let mut colidx = Vec::with_capacity(level * shape.out_channels);
    let mut rowptr = Vec::with_capacity(shape.out_channels + 1);
    rowptr.push(0u32);
    for channel in weights.data().chunks(volume) {
        let nonzero: Vec<usize> = (0..volume).filter(|&i| !channel[i].is_zero()).collect();
        let padding = select_padding_zeros(channel, level - nonzero.len())?;
        for flat in merge_sorted(&nonzero, &padding) {
            let (c, rem) = (flat / (r * s), flat % (r * s));
            // Padding zeros are stored as canonical +0.
            let v = channel[flat];
            values.push(if v.is_zero() { T::zero() } else { v });
            colidx.push(input_offset(shape, c, rem / s, rem % s));
        }
        rowptr.push(values.len() as u32);
    }
    let kernel = CsrKernel {
        values,
        colidx,
        rowptr,
        sparse_level: level,
        shape: *shape,
    };
    debug_assert!(kernel.validate().is_ok());
    Ok((kernel, report))
}

impl<T: Element> CsrKernel<T> {
    /// Assembles a kernel from raw arrays, checking every invariant.
    pub fn from_parts(
        values: Vec<T>,
        colidx: Vec<u32>,
        rowptr: Vec<u32>,
        sparse_level: usize,
        shape: ConvShape,
    ) -> Result<Self> {
        let kernel = CsrKernel {
            values,
            colidx,
            rowptr,
            sparse_level,
            shape,
        };
        kernel.validate()?;
        Ok(kernel)
    }

    /// Assembles a kernel without validation. Only for exercising error paths.
    #[doc(hidden)]
    pub fn from_parts_unchecked(
        values: Vec<T>,
        colidx: Vec<u32>,
        rowptr: Vec<u32>,
        sparse_level: usize,
        shape: ConvShape,
    ) -> Self {
        CsrKernel {
            values,
            colidx,
            rowptr,
            sparse_level,
            shape,
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn colidx(&self) -> &[u32] {
        &self.colidx
    }

    pub fn rowptr(&self) -> &[u32] {
        &self.rowptr
    }

    /// Stored entries per output channel.
    pub fn sparse_level(&self) -> usize {
        self.sparse_level
    }

    pub fn shape(&self) -> &ConvShape {
        &self.shape
    }

    pub fn out_channels(&self) -> usize {
        self.shape.out_channels
    }

    /// Values and offsets of output channel `k`.
    pub fn channel(&self, k: usize) -> (&[T], &[u32]) {
        let (a, b) = (self.rowptr[k] as usize, self.rowptr[k + 1] as usize);
        (&self.values[a..b], &self.colidx[a..b])
    }

    /// Fraction of the filter volume that is *not* stored.
    pub fn stored_sparsity(&self) -> f64 {
        1.0 - self.sparse_level as f64 / self.shape.filter_volume() as f64
    }

    /// Maps a precomputed offset back to `(c, r, s)`.
    pub fn decode_offset(&self, offset: u32) -> Option<(usize, usize, usize)> {
        let (hp, wp) = (self.shape.padded_height(), self.shape.padded_width());
        let off = offset as usize;
        let c = off / (hp * wp);
        let rem = off % (hp * wp);
        let (r, s) = (rem / wp, rem % wp);
        (c < self.shape.in_channels && r < self.shape.kernel_h && s < self.shape.kernel_w)
            .then_some((c, r, s))
    }

    /// Checks all structural invariants.
    ///
    /// Row pointer problems are invariant violations; bad offsets are format
    /// errors.
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        check_addressable(&self.shape)?;
        let k = self.shape.out_channels;
        if self.rowptr.len() != k + 1 {
            return Err(invariant_err!(
                "rowptr has {} entries for {k} output channels",
                self.rowptr.len()
            ));
        }
        if self.rowptr[0] != 0 {
            return Err(invariant_err!("rowptr[0] = {} (expected 0)", self.rowptr[0]));
        }
        if self.sparse_level > self.shape.filter_volume() {
            return Err(invariant_err!(
                "sparse_level {} exceeds filter volume {}",
                self.sparse_level,
                self.shape.filter_volume()
            ));
        }
        for (i, w) in self.rowptr.windows(2).enumerate() {
            if w[1] < w[0] || (w[1] - w[0]) as usize != self.sparse_level {
                return Err(invariant_err!(
                    "channel {i} stores {} entries, sparse_level is {}",
                    w[1] as i64 - w[0] as i64,
                    self.sparse_level
                ));
            }
        }
        let total = self.rowptr[k] as usize;
        if total != self.values.len() || total != self.colidx.len() {
            return Err(invariant_err!(
                "rowptr[K] = {total}, values = {}, colidx = {}",
                self.values.len(),
                self.colidx.len()
            ));
        }
        for ch in 0..k {
            let (_, offsets) = self.channel(ch);
            for (j, &off) in offsets.iter().enumerate() {
                if self.decode_offset(off).is_none() {
                    return Err(format_err!(
                        "channel {ch}: colidx {off} is outside the {}x{}x{} filter",
                        self.shape.in_channels,
                        self.shape.kernel_h,
                        self.shape.kernel_w
                    ));
                }
                if j > 0 && offsets[j - 1] >= off {
                    return Err(format_err!(
                        "channel {ch}: colidx not strictly increasing ({} then {off})",
                        offsets[j - 1]
                    ));
                }
            }
        }
        Ok(())
    }

    /// Same structure with values transformed by `f`; stored zeros stay zero.
    pub fn map_values(&self, mut f: impl FnMut(T) -> T) -> Self {
        CsrKernel {
            values: self
                .values
                .iter()
                .map(|&v| if v.is_zero() { T::zero() } else { f(v) })
                .collect(),
            ..self.clone()
        }
    }

    /// Replaces the value array, keeping the structure.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(invariant_err!(
                "replacement has {} values, kernel stores {}",
                values.len(),
                self.values.len()
            ));
        }
        Ok(CsrKernel {
            values,
            ..self.clone()
        })
    }

    pub fn cast<U: Element>(&self) -> CsrKernel<U> {
        CsrKernel {
            values: self.values.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            colidx: self.colidx.clone(),
            rowptr: self.rowptr.clone(),
            sparse_level: self.sparse_level,
            shape: self.shape,
        }
    }
}

/// Expands a kernel back to dense `K×C×R×S` weights.
pub fn decompress<T: Element>(kernel: &CsrKernel<T>) -> Result<Tensor4D<T>> {
    kernel.validate()?;
    let shape = kernel.shape();
    let mut dense = Tensor4D::zeros(shape.weight_dims());
    for k in 0..shape.out_channels {
        let (values, offsets) = kernel.channel(k);
        for (&v, &off) in values.iter().zip(offsets) {
            let (c, r, s) = kernel
                .decode_offset(off)
                .expect("validated offsets decode");
            dense.set(k, c, r, s, v);
        }
    }
    Ok(dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn w(dims: [usize; 4], data: &[f32]) -> Tensor4D<f32> {
        Tensor4D::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn report_all_zero_and_dense() {
        let zero = Tensor4D::<f32>::zeros([2, 3, 3, 3]);
        let r = analyze_sparsity(&zero).unwrap();
        assert_eq!(r.per_channel_nnz, vec![0, 0]);
        assert_eq!(r.layer_sparsity, 1.0);

        let dense = Tensor4D::<f32>::filled([2, 3, 3, 3], 0.5);
        let r = analyze_sparsity(&dense).unwrap();
        assert_eq!(r.unified_nnz, 27);
        assert_eq!(r.layer_sparsity, 0.0);
    }

    #[test]
    fn report_counts_padding() {
        let t = w([2, 1, 2, 2], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 4.0, 0.0]);
        let r = analyze_sparsity(&t).unwrap();
        assert_eq!(r.per_channel_nnz, vec![3, 1]);
        assert_eq!(r.unified_nnz, 3);
        assert_eq!(r.padded_zero_count, 2);
    }

    #[test]
    fn report_rejects_empty() {
        assert!(analyze_sparsity(&Tensor4D::<f32>::zeros([0, 1, 1, 1])).is_err());
    }

    #[test]
    fn padding_selection_rules() {
        assert!(select_padding_zeros(&[1.0f32, 0.0], 0).unwrap().is_empty());
        assert_eq!(select_padding_zeros(&[1.0f32, 0.0, 0.0, 0.0], 1).unwrap(), vec![1]);
        assert_eq!(select_padding_zeros(&[0.0f32, 0.0, 1.0, 0.0], 2).unwrap(), vec![1, 3]);
        assert_eq!(select_padding_zeros(&[0.0f32; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(select_padding_zeros(&[1.0f32, 0.0], 2).is_err());
    }

    #[test]
    fn padding_selection_is_contiguous() {
        // Every chosen index touches a real non-zero or another chosen index.
        let ch = [0.0f32, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0];
        for deficit in 1..=8 {
            let picked = select_padding_zeros(&ch, deficit).unwrap();
            for &i in &picked {
                let touches = |j: usize| ch[j] != 0.0 || picked.contains(&j);
                let left = i > 0 && touches(i - 1);
                let right = i + 1 < ch.len() && touches(i + 1);
                assert!(left || right, "deficit {deficit}: {picked:?}");
            }
        }
    }

    #[test]
    fn dense_1x1_layout() {
        let shape = ConvShape::chwk(2, 3, 3, 2, 1, 0);
        let t = w([2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = build_csr(&t, &shape).unwrap();
        assert_eq!(k.rowptr(), &[0, 2, 4]);
        assert_eq!(k.colidx(), &[0, 9, 0, 9]);
        assert_eq!(k.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn all_zero_layer() {
        let shape = ConvShape::chwk(3, 4, 4, 2, 3, 1);
        let k = build_csr(&Tensor4D::<f32>::zeros(shape.weight_dims()), &shape).unwrap();
        assert_eq!(k.sparse_level(), 0);
        assert!(k.values().is_empty());
        assert_eq!(k.rowptr(), &[0, 0, 0]);
        assert_eq!(decompress(&k).unwrap(), Tensor4D::zeros(shape.weight_dims()));
    }

    #[test]
    fn offsets_use_padded_geometry() {
        let shape = ConvShape::chwk(2, 4, 5, 1, 3, 1);
        let mut t = Tensor4D::<f32>::zeros(shape.weight_dims());
        t.set(0, 1, 2, 1, 1.0);
        let k = build_csr(&t, &shape).unwrap();
        // Hp = 6, Wp = 7
        assert_eq!(k.colidx(), &[6 * 7 + 2 * 7 + 1]);
        assert_eq!(k.decode_offset(k.colidx()[0]), Some((1, 2, 1)));
    }

    #[test]
    fn unified_rows() {
        let shape = ConvShape::chwk(1, 3, 3, 2, 2, 0);
        let t = w([2, 1, 2, 2], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 4.0, 0.0]);
        let k = build_csr(&t, &shape).unwrap();
        assert_eq!(k.sparse_level(), 3);
        assert_eq!(k.rowptr(), &[0, 3, 6]);
        let (vals, offs) = k.channel(1);
        assert_eq!(vals, &[0.0, 4.0, 0.0]);
        // flat indices 1, 2, 3 -> (0,0,1), (0,1,0), (0,1,1) with Wp = 3
        assert_eq!(offs, &[1, 3, 4]);
        assert_eq!(decompress(&k).unwrap(), t);
    }

    #[test]
    fn negative_zero_is_canonicalized() {
        let shape = ConvShape::chwk(1, 2, 2, 1, 2, 0);
        let t = w([1, 1, 2, 2], &[-0.0, 1.0, 0.0, 0.0]);
        let k = build_csr(&t, &shape).unwrap();
        assert_eq!(k.sparse_level(), 1);
        let back = decompress(&k).unwrap();
        assert_eq!(back.data()[0].to_bits(), 0);
    }

    #[test]
    fn corrupt_kernels_rejected() {
        let shape = ConvShape::chwk(1, 3, 3, 1, 2, 0);
        let dup = CsrKernel::from_parts_unchecked(vec![1.0f32, 2.0], vec![1, 1], vec![0, 2], 2, shape);
        assert!(matches!(decompress(&dup), Err(Error::Format(_))));
        let out_of_range = CsrKernel::from_parts_unchecked(vec![1.0f32], vec![2], vec![0, 1], 1, shape);
        assert!(matches!(decompress(&out_of_range), Err(Error::Format(_))));
        let ragged = CsrKernel::from_parts(vec![1.0f32], vec![0], vec![0, 1], 2, shape);
        assert!(matches!(ragged, Err(Error::Invariant(_))));
    }

    #[test]
    fn rejects_weight_shape_mismatch() {
        let shape = ConvShape::chwk(2, 3, 3, 2, 1, 0);
        assert!(build_csr(&Tensor4D::<f32>::zeros([2, 3, 1, 1]), &shape).is_err());
    }

    #[test]
    fn map_values_keeps_zeros() {
        let shape = ConvShape::chwk(1, 3, 3, 2, 2, 0);
        let t = w([2, 1, 2, 2], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 4.0, 0.0]);
        let k = build_csr(&t, &shape).unwrap().map_values(|v| v + 10.0);
        assert_eq!(k.channel(1).0, &[0.0, 14.0, 0.0]);
    }
}
