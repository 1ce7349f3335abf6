//! Direct sparse convolution over [`CsrKernel`]s.
//!
//! Work is split into `ceil(N / sub_batch_size) · K` units. A unit owns one
//! output channel for one sub-batch of inputs: it stages that channel's
//! `(value, offset)` pairs once and reuses them for every input in the
//! sub-batch, keeping partial sums in a local buffer that is written to the
//! output exactly once. Because every channel stores `sparse_level` entries,
//! all units perform the same amount of work.
//!
//! The accumulation order inside one output element is the kernel's colidx
//! order, independent of the plan, so outputs are bit-identical for every
//! `sub_batch_size` and worker count.

use std::borrow::Cow;
use std::collections::BTreeMap;

use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csr::CsrKernel;
use crate::dense::{accumulate_plane, Geometry};
use crate::error::{config_err, shape_err, Result};
use crate::pool::with_workers;
use crate::tensor::{pad_input, Accum, DType, Element, Tensor4D};
use crate::timing::{measure, TimingConfig, TimingStats};

/// Allowed sub-batch sizes.
pub const SUB_BATCH_CANDIDATES: [usize; 5] = [1, 2, 4, 8, 16];

/// Partial-sum tile budget per work unit, in accumulator elements.
const TILE_ELEMS: usize = 8192;

/// Output channels of one block processed together by the channel-major path.
const CHANNEL_GROUP: usize = 8;

/// Input elements (over all channels) of one position tile in the
/// channel-major path; sized to stay in L2.
const INPUT_TILE_ELEMS: usize = 1 << 18;

/// Largest sub-batch block, in padded-image accumulator elements, processed
/// as a single channel-major run.
const BLOCK_TILE_ELEMS: usize = 32768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnginePlan {
    pub sub_batch_size: usize,
    /// Worker threads; 0 selects every hardware thread.
    pub worker_count: usize,
    pub profile: DType,
}

impl EnginePlan {
    pub fn new(sub_batch_size: usize, worker_count: usize, profile: DType) -> Result<Self> {
        let plan = EnginePlan {
            sub_batch_size,
            worker_count,
            profile,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUB_BATCH_CANDIDATES.contains(&self.sub_batch_size) {
            return Err(config_err!(
                "sub_batch_size {} not in {SUB_BATCH_CANDIDATES:?}",
                self.sub_batch_size
            ));
        }
        if self.profile == DType::F64 {
            return Err(config_err!("the sparse engine runs f32 or f16 profiles"));
        }
        Ok(())
    }

    fn check_profile<T: Element>(&self) -> Result<()> {
        self.validate()?;
        if self.profile != T::DTYPE {
            return Err(config_err!(
                "plan profile {} does not match tensor profile {}",
                self.profile,
                T::DTYPE
            ));
        }
        Ok(())
    }
}

/// Counters gathered during one sparse convolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub work_units: usize,
    /// Batch rounded up to a multiple of `sub_batch_size`.
    pub padded_batch: usize,
    /// Multiply-accumulates actually executed.
    pub macs: u64,
    /// Multiply-accumulates per output element, one entry per work unit.
    pub unit_macs_per_element: Vec<u64>,
}

struct OutPtr<T>(*mut T);

// SAFETY: each work unit writes a disjoint set of output planes.
unsafe impl<T: Send> Send for OutPtr<T> {}
unsafe impl<T: Send> Sync for OutPtr<T> {}

impl<T> OutPtr<T> {
    fn get(&self) -> *mut T {
        self.0
    }
}

fn check_call<T: Element>(
    x: &Tensor4D<T>,
    kernel: &CsrKernel<T>,
    bias: &[T],
    plan: &EnginePlan,
) -> Result<Geometry> {
    plan.check_profile::<T>()?;
    let g = Geometry::resolve(kernel.shape(), x.dims())?;
    if bias.len() != g.k {
        return Err(shape_err!(
            "bias has {} entries for {} output channels",
            bias.len(),
            g.k
        ));
    }
    Ok(g)
}

/// Direct sparse convolution.
pub fn conv_sparse<T: Element>(
    x: &Tensor4D<T>,
    kernel: &CsrKernel<T>,
    bias: &[T],
    plan: &EnginePlan,
) -> Result<Tensor4D<T>> {
    conv_sparse_with_stats(x, kernel, bias, plan).map(|(y, _)| y)
}

pub fn conv_sparse_with_stats<T: Element>(
    x: &Tensor4D<T>,
    kernel: &CsrKernel<T>,
    bias: &[T],
    plan: &EnginePlan,
) -> Result<(Tensor4D<T>, EngineStats)> {
    let g = check_call(x, kernel, bias, plan)?;
    let hw = g.hp * g.wp;
    if g.stride == 1 && plan.sub_batch_size * hw <= BLOCK_TILE_ELEMS {
        // Channel-major input: the sub-batch's copies of one input channel
        // are adjacent, so a stored entry is one contiguous run spanning
        // every image of the block.
        let xt = pad_channel_major(x, g.padding);
        return run_blocked(&g, kernel, bias, plan, &xt);
    }
    let xpad = if g.padding == 0 {
        Cow::Borrowed(x)
    } else {
        Cow::Owned(pad_input(x, g.padding))
    };
    let xa = T::widen(xpad.data());
    if g.stride == 1 {
        // Rows are accumulated at the padded pitch `Wp`, so one stored entry
        // is a single contiguous run over the whole row tile.
        let layout = AccLayout {
            row_pitch: g.wp,
            plane_pitch: g.e * g.wp,
        };
        return run_units(&g, kernel, bias, plan, layout, |staged, acc, n0, nb, rows| {
            let len = (rows.len() - 1) * g.wp + g.f;
            let mut entries = Vec::with_capacity(staged.len());
            for ln in 0..nb {
                let shift = (n0 + ln) * g.image_len() + rows.start * g.wp;
                entries.clear();
                entries.extend(staged.iter().map(|&(v, off)| (v, off + shift)));
                T::Acc::gather_axpy(&mut acc[ln * layout.plane_pitch..][..len], &entries, &xa);
            }
        });
    }
    let layout = AccLayout {
        row_pitch: g.f,
        plane_pitch: g.plane_len(),
    };
    run_units(&g, kernel, bias, plan, layout, |staged, acc, n0, nb, rows| {
        let tile = rows.len() * g.f;
        for &(v, off) in staged {
            for ln in 0..nb {
                let base = (n0 + ln) * g.image_len() + off + rows.start * g.stride * g.wp;
                accumulate_plane(&mut acc[ln * layout.plane_pitch..][..tile], v, &xa, base, &g);
            }
        }
    })
}

/// Zero-padded `C×N×Hp×Wp` copy of an `N×C×H×W` tensor in accumulator
/// precision.
fn pad_channel_major<T: Element>(x: &Tensor4D<T>, padding: usize) -> Vec<T::Acc> {
    let [n, c, h, w] = x.dims();
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![T::Acc::zero(); c * n * hp * wp];
    for (dst, (ch, img)) in out.chunks_exact_mut(hp * wp).zip((0..c).flat_map(|ch| (0..n).map(move |img| (ch, img)))) {
        let src = x.plane(img, ch);
        for (d, s) in dst[padding * wp..].chunks_exact_mut(wp).zip(src.chunks_exact(w)) {
            for (o, &v) in d[padding..padding + w].iter_mut().zip(s) {
                *o = v.to_acc();
            }
        }
    }
    out
}

/// Sparse convolution over sequences laid out as `N×C×1×W` with a `1×S`
/// kernel and no padding. Each output is a single row, so every staged entry
/// becomes one long contiguous multiply-accumulate.
pub fn conv_sparse_1d<T: Element>(
    x: &Tensor4D<T>,
    kernel: &CsrKernel<T>,
    bias: &[T],
    plan: &EnginePlan,
) -> Result<Tensor4D<T>> {
    conv_sparse_1d_with_stats(x, kernel, bias, plan).map(|(y, _)| y)
}

pub fn conv_sparse_1d_with_stats<T: Element>(
    x: &Tensor4D<T>,
    kernel: &CsrKernel<T>,
    bias: &[T],
    plan: &EnginePlan,
) -> Result<(Tensor4D<T>, EngineStats)> {
    let s = kernel.shape();
    if s.height != 1 || s.kernel_h != 1 || s.padding != 0 {
        return Err(shape_err!(
            "1-D path needs H = 1, a 1×S kernel and no padding (got H={}, R={}, pad={})",
            s.height,
            s.kernel_h,
            s.padding
        ));
    }
    conv_sparse_with_stats(x, kernel, bias, plan)
}

/// True when a layer fits the 1-D path of [`conv_sparse_1d`].
pub fn is_sequence_layer(shape: &crate::ConvShape) -> bool {
    shape.height == 1 && shape.kernel_h == 1 && shape.padding == 0
}

/// [`conv_sparse_1d`] for sequence layers, [`conv_sparse`] otherwise. Both
/// paths accumulate in the same order and give identical results.
pub fn conv_sparse_auto<T: Element>(
    x: &Tensor4D<T>,
    kernel: &CsrKernel<T>,
    bias: &[T],
    plan: &EnginePlan,
) -> Result<Tensor4D<T>> {
    if is_sequence_layer(kernel.shape()) {
        conv_sparse_1d(x, kernel, bias, plan)
    } else {
        conv_sparse(x, kernel, bias, plan)
    }
}

/// Accumulator geometry of one work unit: `nb` planes of `plane_pitch`
/// elements, rows `row_pitch ≥ F` apart. Only the first `F` columns of the
/// first `E` rows reach the output.
#[derive(Clone, Copy)]
struct AccLayout {
    row_pitch: usize,
    plane_pitch: usize,
}

/// Shared work-unit driver. `body` accumulates one row tile of a unit into
/// `acc`, offset to the tile start.
fn run_units<T, F>(
    g: &Geometry,
    kernel: &CsrKernel<T>,
    bias: &[T],
    plan: &EnginePlan,
    layout: AccLayout,
    body: F,
) -> Result<(Tensor4D<T>, EngineStats)>
where
    T: Element,
    F: Fn(&[(T::Acc, usize)], &mut [T::Acc], usize, usize, std::ops::Range<usize>) + Sync,
{
    let sb = plan.sub_batch_size;
    let blocks = g.n.div_ceil(sb);
    let units = blocks * g.k;
    let plane = g.plane_len();
    let level = kernel.sparse_level() as u64;

    let mut out = vec![T::zero(); g.n * g.k * plane];
    let out_ptr = OutPtr(out.as_mut_ptr());
    let unit_macs: Vec<u64> = with_workers(plan.worker_count, || {
        (0..units)
            .into_par_iter()
            .map(|u| {
                let (block, k) = (u / g.k, u % g.k);
                let n0 = block * sb;
                let nb = sb.min(g.n - n0);
                let (values, offsets) = kernel.channel(k);
                let staged: Vec<(T::Acc, usize)> = values
                    .iter()
                    .zip(offsets)
                    .map(|(v, &o)| (v.to_acc(), o as usize))
                    .collect();
                let b = bias[k].to_acc();

                let rows_per_tile = (TILE_ELEMS / (nb * layout.row_pitch)).clamp(1, g.e);
                let acc_plane = layout.plane_pitch;
                let mut acc = vec![T::Acc::zero(); nb * acc_plane];
                let mut row = 0;
                while row < g.e {
                    let rows = row..(row + rows_per_tile).min(g.e);
                    let start = rows.start * layout.row_pitch;
                    body(&staged, &mut acc[start..], n0, nb, rows.clone());
                    row = rows.end;
                }
                for ln in 0..nb {
                    let dst_start = ((n0 + ln) * g.k + k) * plane;
                    // SAFETY: plane (n0 + ln, k) belongs to this unit alone and lies
                    // inside `out`, which outlives the parallel section.
                    let dst = unsafe {
                        std::slice::from_raw_parts_mut(out_ptr.get().add(dst_start), plane)
                    };
                    let src = &acc[ln * acc_plane..(ln + 1) * acc_plane];
                    for (dst_row, src_row) in dst.chunks_exact_mut(g.f).zip(src.chunks_exact(layout.row_pitch)) {
                        for (o, a) in dst_row.iter_mut().zip(src_row) {
                            *o = T::from_acc(*a + b);
                        }
                    }
                }
                staged.len() as u64
            })
            .collect()
    });
    debug_assert!(unit_macs.iter().all(|&m| m == level));
    let stats = EngineStats {
        work_units: units,
        padded_batch: blocks * sb,
        macs: level * (g.n * g.k * plane) as u64,
        unit_macs_per_element: unit_macs,
    };
    Ok((Tensor4D::from_vec(g.output_dims(), out)?, stats))
}

/// Driver for the channel-major layout. Units of one block are executed in
/// groups of [`CHANNEL_GROUP`] output channels that walk the block together,
/// one position tile at a time, so each tile of the input is loaded once per
/// group rather than once per channel. Accumulator tiles use the padded
/// image geometry; positions outside the `E×F` window are scratch.
fn run_blocked<T: Element>(
    g: &Geometry,
    kernel: &CsrKernel<T>,
    bias: &[T],
    plan: &EnginePlan,
    xt: &[T::Acc],
) -> Result<(Tensor4D<T>, EngineStats)> {
    let sb = plan.sub_batch_size;
    let blocks = g.n.div_ceil(sb);
    let groups = g.k.div_ceil(CHANNEL_GROUP);
    let hw = g.hp * g.wp;
    let plane = g.plane_len();
    let level = kernel.sparse_level() as u64;
    let tile = (INPUT_TILE_ELEMS / g.c).clamp(256, 4096) / 32 * 32;

    let mut out = vec![T::zero(); g.n * g.k * plane];
    let out_ptr = OutPtr(out.as_mut_ptr());
    let unit_macs: Vec<Vec<u64>> = with_workers(plan.worker_count, || {
        (0..blocks * groups)
            .into_par_iter()
            .map(|task| {
                let (block, group) = (task / groups, task % groups);
                let n0 = block * sb;
                let nb = sb.min(g.n - n0);
                let ks = group * CHANNEL_GROUP..((group + 1) * CHANNEL_GROUP).min(g.k);
                let len = (nb - 1) * hw + (g.e - 1) * g.wp + g.f;
                let staged: Vec<Vec<(T::Acc, usize)>> = ks
                    .clone()
                    .map(|k| {
                        let (values, offsets) = kernel.channel(k);
                        values
                            .iter()
                            .zip(offsets)
                            .map(|(v, &o)| {
                                let o = o as usize;
                                (v.to_acc(), o + (o / hw * (g.n - 1) + n0) * hw)
                            })
                            .collect()
                    })
                    .collect();
                let biases: Vec<T::Acc> = ks.clone().map(|k| bias[k].to_acc()).collect();
                let mut acc = vec![T::Acc::zero(); ks.len() * tile];
                let mut t0 = 0;
                while t0 < len {
                    let t1 = (t0 + tile).min(len);
                    for (entries, a) in staged.iter().zip(acc.chunks_exact_mut(tile)) {
                        a.fill(T::Acc::zero());
                        T::Acc::gather_axpy(&mut a[..t1 - t0], entries, &xt[t0..]);
                    }
                    // Copy the in-window part of each padded row segment out.
                    let mut p = t0;
                    while p < t1 {
                        let (ln, rem) = (p / hw, p % hw);
                        let (y, col) = (rem / g.wp, rem % g.wp);
                        let seg_end = t1.min(p + g.wp - col);
                        if y < g.e && col < g.f {
                            let cols = col..g.f.min(col + seg_end - p);
                            for ((k, a), &b) in ks.clone().zip(acc.chunks_exact(tile)).zip(&biases) {
                                let dst_start = (((n0 + ln) * g.k + k) * g.e + y) * g.f + cols.start;
                                // SAFETY: plane (n0 + ln, k) belongs to this task alone and
                                // lies inside `out`, which outlives the parallel section.
                                let dst = unsafe { std::slice::from_raw_parts_mut(out_ptr.get().add(dst_start), cols.len()) };
                                for (o, v) in dst.iter_mut().zip(&a[p - t0..]) {
                                    *o = T::from_acc(*v + b);
                                }
                            }
                        }
                        p = seg_end;
                    }
                    t0 = t1;
                }
                staged.iter().map(|e| e.len() as u64).collect()
            })
            .collect()
    });
    // Report per (block, channel) unit in the same order as `run_units`.
    let unit_macs: Vec<u64> = unit_macs.into_iter().flatten().collect();
    debug_assert!(unit_macs.iter().all(|&m| m == level));
    let stats = EngineStats {
        work_units: blocks * g.k,
        padded_batch: blocks * sb,
        macs: level * (g.n * g.k * plane) as u64,
        unit_macs_per_element: unit_macs,
    };
    Ok((Tensor4D::from_vec(g.output_dims(), out)?, stats))
}

/// Result of timing each sub-batch candidate on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: usize,
    pub timings: BTreeMap<usize, TimingStats>,
}

/// Times every candidate `sub_batch_size` and returns the one with the
/// smallest median; ties go to the smaller size.
pub fn tune_sub_batch<T: Element>(
    x: &Tensor4D<T>,
    kernel: &CsrKernel<T>,
    bias: &[T],
    candidates: &[usize],
    worker_count: usize,
    timing: TimingConfig,
) -> Result<TuneResult> {
    if candidates.is_empty() {
        return Err(config_err!("no sub-batch candidates to tune"));
    }
    let timing = TimingConfig::new(timing.warmups.max(2), timing.repetitions.max(5));
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut timings = BTreeMap::new();
    for &sb in &sorted {
        let plan = EnginePlan::new(sb, worker_count, T::DTYPE)?;
        // Surface errors before timing.
        conv_sparse_auto(x, kernel, bias, &plan)?;
        let stats = measure(timing, || conv_sparse_auto(x, kernel, bias, &plan));
        timings.insert(sb, stats);
    }
    let best = sorted
        .iter()
        .copied()
        .reduce(|best, sb| {
            if timings[&sb].median_ms < timings[&best].median_ms {
                sb
            } else {
                best
            }
        })
        .expect("non-empty candidates");
    Ok(TuneResult { best, timings })
}

/// CSR without sparsity unification: channels store only their own non-zeros.
///
/// Exists to measure what unification buys; not used by the pipeline.
#[cfg(feature = "ragged")]
pub mod ragged {
    use super::*;
    use crate::csr::{check_addressable, input_offset};

    #[derive(Debug, Clone)]
    pub struct RaggedCsr<T> {
        pub values: Vec<T>,
        pub colidx: Vec<u32>,
        pub rowptr: Vec<u32>,
        pub shape: crate::ConvShape,
    }

    pub fn build_ragged<T: Element>(weights: &Tensor4D<T>, shape: &crate::ConvShape) -> Result<RaggedCsr<T>> {
        shape.validate()?;
        check_addressable(shape)?;
        if weights.dims() != shape.weight_dims() {
            return Err(shape_err!("weights do not match layer"));
        }
        let (r, s) = (shape.kernel_h, shape.kernel_w);
        let mut out = RaggedCsr {
            values: Vec::new(),
            colidx: Vec::new(),
            rowptr: vec![0],
            shape: *shape,
        };
        for ch in weights.data().chunks(shape.filter_volume()) {
            for (flat, &v) in ch.iter().enumerate() {
                if !v.is_zero() {
                    let (c, rem) = (flat / (r * s), flat % (r * s));
                    out.values.push(v);
                    out.colidx.push(input_offset(shape, c, rem / s, rem % s));
                }
            }
            out.rowptr.push(out.values.len() as u32);
        }
        Ok(out)
    }

    /// Same unit decomposition as [`conv_sparse`], with per-channel trip counts.
    pub fn conv_sparse_ragged<T: Element>(
        x: &Tensor4D<T>,
        kernel: &RaggedCsr<T>,
        bias: &[T],
        plan: &EnginePlan,
    ) -> Result<Tensor4D<T>> {
        plan.check_profile::<T>()?;
        let g = Geometry::resolve(&kernel.shape, x.dims())?;
        let xpad = pad_input(x, g.padding);
        let xa = T::widen(xpad.data());
        let sb = plan.sub_batch_size;
        let plane = g.plane_len();
        let blocks = g.n.div_ceil(sb);
        let mut out = vec![T::zero(); g.n * g.k * plane];
        let out_ptr = OutPtr(out.as_mut_ptr());
        with_workers(plan.worker_count, || {
            (0..blocks * g.k).into_par_iter().for_each(|u| {
                let (block, k) = (u / g.k, u % g.k);
                let n0 = block * sb;
                let nb = sb.min(g.n - n0);
                let (a, b) = (kernel.rowptr[k] as usize, kernel.rowptr[k + 1] as usize);
                let mut acc = vec![T::Acc::zero(); nb * plane];
                for (v, &off) in kernel.values[a..b].iter().zip(&kernel.colidx[a..b]) {
                    for ln in 0..nb {
                        let base = (n0 + ln) * g.image_len() + off as usize;
                        accumulate_plane(&mut acc[ln * plane..(ln + 1) * plane], v.to_acc(), &xa, base, &g);
                    }
                }
                let bk = bias[k].to_acc();
                for ln in 0..nb {
                    // SAFETY: disjoint planes per unit, as in `run_units`.
                    let dst = unsafe {
                        std::slice::from_raw_parts_mut(out_ptr.get().add(((n0 + ln) * g.k + k) * plane), plane)
                    };
                    for (o, a) in dst.iter_mut().zip(&acc[ln * plane..(ln + 1) * plane]) {
                        *o = T::from_acc(*a + bk);
                    }
                }
            })
        });
        Tensor4D::from_vec(g.output_dims(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csr::build_csr;
    use crate::dense::{conv_dense_direct, ConvLayerDense};
    use crate::tensor::max_rel_error;
    use crate::ConvShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse_weights(shape: &ConvShape, sparsity: f64, rng: &mut ChaCha8Rng) -> Tensor4D<f32> {
        Tensor4D::from_fn(shape.weight_dims(), |_| {
            if rng.random::<f64>() < sparsity {
                0.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
    }

    fn plan(sb: usize) -> EnginePlan {
        EnginePlan::new(sb, 1, DType::F32).unwrap()
    }

    #[test]
    fn dense_kernel_matches_direct_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = ConvShape::chwk(3, 7, 7, 4, 3, 1).with_batch(3);
        let w = sparse_weights(&shape, 0.0, &mut rng);
        let x = Tensor4D::from_fn(shape.input_dims(), |_| rng.random_range(-1.0..1.0));
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let dense = conv_dense_direct(&x, &ConvLayerDense::new(w.clone(), bias.clone(), shape).unwrap()).unwrap();
        let kernel = build_csr(&w, &shape).unwrap();
        let sparse = conv_sparse(&x, &kernel, &bias, &plan(2)).unwrap();
        assert_eq!(sparse, dense);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let shape = ConvShape::chwk(2, 5, 5, 2, 3, 1);
        let kernel = build_csr(&Tensor4D::<f32>::zeros(shape.weight_dims()), &shape).unwrap();
        let x = Tensor4D::filled(shape.input_dims(), 3.0f32);
        let y = conv_sparse(&x, &kernel, &[1.5, -1.0], &plan(1)).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 1.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn plans_agree_and_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shape = ConvShape::chwk(8, 16, 16, 8, 3, 1).with_batch(8);
        let w = sparse_weights(&shape, 0.9, &mut rng);
        let x = Tensor4D::from_fn(shape.input_dims(), |_| rng.random_range(-1.0..1.0));
        let bias = vec![0.0; 8];
        let dense = conv_dense_direct(&x, &ConvLayerDense::new(w.clone(), bias.clone(), shape).unwrap()).unwrap();
        let kernel = build_csr(&w, &shape).unwrap();
        let first = conv_sparse(&x, &kernel, &bias, &plan(1)).unwrap();
        assert!(max_rel_error(first.data(), dense.data()) < 1e-4);
        for sb in [2, 4, 8] {
            assert_eq!(conv_sparse(&x, &kernel, &bias, &plan(sb)).unwrap(), first);
        }
    }

    #[test]
    fn uneven_batch_is_padded_in_stats() {
        let shape = ConvShape::chwk(1, 4, 4, 2, 1, 0).with_batch(5);
        let w = Tensor4D::filled(shape.weight_dims(), 1.0f32);
        let kernel = build_csr(&w, &shape).unwrap();
        let x = Tensor4D::filled(shape.input_dims(), 1.0f32);
        let (_, stats) = conv_sparse_with_stats(&x, &kernel, &[0.0, 0.0], &plan(4)).unwrap();
        assert_eq!(stats.padded_batch, 8);
        assert_eq!(stats.work_units, 4);
        assert_eq!(stats.macs, 5 * 2 * 16);
    }

    #[test]
    fn one_d_constant_input() {
        let shape = ConvShape {
            batch: 1,
            in_channels: 1,
            height: 1,
            width: 10,
            out_channels: 1,
            kernel_h: 1,
            kernel_w: 2,
            stride: 1,
            padding: 0,
        };
        let kernel = build_csr(&Tensor4D::filled([1, 1, 1, 2], 1.0f32), &shape).unwrap();
        let x = Tensor4D::filled([1, 1, 1, 10], 2.5f32);
        let y = conv_sparse_1d(&x, &kernel, &[0.0], &plan(1)).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 9]);
        assert!(y.data().iter().all(|&v| v == 5.0));

        let empty = build_csr(&Tensor4D::<f32>::zeros([1, 1, 1, 2]), &shape).unwrap();
        let y = conv_sparse_1d(&x, &empty, &[0.0], &plan(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_d_rejects_2d_layers() {
        let shape = ConvShape::chwk(1, 4, 4, 1, 3, 1);
        let kernel = build_csr(&Tensor4D::<f32>::zeros(shape.weight_dims()), &shape).unwrap();
        let x = Tensor4D::<f32>::zeros(shape.input_dims());
        assert!(conv_sparse_1d(&x, &kernel, &[0.0], &plan(1)).is_err());
    }

    #[test]
    fn invalid_plans() {
        assert!(EnginePlan::new(3, 1, DType::F32).is_err());
        assert!(EnginePlan::new(4, 1, DType::F64).is_err());
        let shape = ConvShape::chwk(1, 4, 4, 1, 1, 0);
        let kernel = build_csr(&Tensor4D::<f32>::zeros(shape.weight_dims()), &shape).unwrap();
        let x = Tensor4D::<f32>::zeros(shape.input_dims());
        let f16_plan = EnginePlan::new(1, 1, DType::F16).unwrap();
        assert!(conv_sparse(&x, &kernel, &[0.0], &f16_plan).is_err());
        assert!(conv_sparse(&x, &kernel, &[0.0, 1.0], &plan(1)).is_err());
    }

    #[test]
    fn tune_single_candidate() {
        let shape = ConvShape::chwk(2, 6, 6, 2, 3, 1).with_batch(4);
        let kernel = build_csr(&Tensor4D::filled(shape.weight_dims(), 1.0f32), &shape).unwrap();
        let x = Tensor4D::filled(shape.input_dims(), 1.0f32);
        let r = tune_sub_batch(&x, &kernel, &[0.0, 0.0], &[4], 1, TimingConfig::default()).unwrap();
        assert_eq!(r.best, 4);
        assert_eq!(r.timings.len(), 1);
        assert!(tune_sub_batch(&x, &kernel, &[0.0, 0.0], &[], 1, TimingConfig::default()).is_err());
    }

    #[test]
    fn tune_picks_argmin() {
        let shape = ConvShape::chwk(4, 8, 8, 4, 3, 1).with_batch(8);
        let kernel = build_csr(&Tensor4D::filled(shape.weight_dims(), 0.5f32), &shape).unwrap();
        let x = Tensor4D::filled(shape.input_dims(), 1.0f32);
        let r = tune_sub_batch(&x, &kernel, &[0.0; 4], &SUB_BATCH_CANDIDATES, 1, TimingConfig::default()).unwrap();
        let best = r.timings[&r.best].median_ms;
        assert!(r.timings.values().all(|t| best <= t.median_ms));
        assert!(r.timings.values().all(|t| t.repetitions >= 5));
    }

    #[cfg(feature = "ragged")]
    #[test]
    fn ragged_matches_unified() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let shape = ConvShape::chwk(4, 6, 6, 4, 3, 1).with_batch(2);
        let w = sparse_weights(&shape, 0.8, &mut rng);
        let x = Tensor4D::from_fn(shape.input_dims(), |_| rng.random_range(-1.0..1.0));
        let unified = conv_sparse(&x, &build_csr(&w, &shape).unwrap(), &[0.0; 4], &plan(2)).unwrap();
        let ragged = ragged::conv_sparse_ragged(&x, &ragged::build_ragged(&w, &shape).unwrap(), &[0.0; 4], &plan(2)).unwrap();
        assert!(max_rel_error(ragged.data(), unified.data()) < 1e-6);
    }
}
