//! Per-layer timing of sparse and dense convolution, sparsity sweeps,
//! per-layer algorithm selection and report rendering.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use half::f16;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csr::{build_csr, CsrKernel};
use crate::data::Dataset;
use crate::dense::{conv_dense_direct, conv_dense_gemm, ConvLayerDense};
use crate::engine::{conv_sparse_auto, tune_sub_batch, EnginePlan, SUB_BATCH_CANDIDATES};
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::pool::with_workers;
use crate::shape::ConvShape;
use crate::tensor::{max_rel_error, DType, Element, Tensor4D};
use crate::timing::{measure, TimingConfig, TimingStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    SparseDirect,
    DenseDirect,
    DenseGemm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::SparseDirect, Algorithm::DenseDirect, Algorithm::DenseGemm];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SparseDirect => "sparse-direct",
            Algorithm::DenseDirect => "dense-direct",
            Algorithm::DenseGemm => "dense-gemm",
        }
    }

    pub fn is_dense(self) -> bool {
        self != Algorithm::SparseDirect
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| config_err!("unknown algorithm `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSource {
    TablePreset,
    ModelFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// Geometry with batch 1; the benchmark batch is applied on top.
    pub shape: ConvShape,
    pub sparsity: f64,
    pub source: LayerSource,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, shape: ConvShape, sparsity: f64) -> Self {
        LayerSpec {
            name: name.into(),
            shape,
            sparsity,
            source: LayerSource::TablePreset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(config_err!("layer {}: sparsity {} outside [0, 1]", self.name, self.sparsity));
        }
        self.shape.validate()?;
        Ok(())
    }
}

/// Preset names accepted by [`preset`].
pub const PRESETS: [&str; 4] = ["vgg16", "resnet-1x1", "densenet-1x1", "cnn-non-static"];

/// 1-D layer over an `C × 1 × W` sequence with a `1 × S` kernel.
pub fn sequence_shape(channels: usize, length: usize, filters: usize, kernel: usize) -> ConvShape {
    ConvShape {
        batch: 1,
        in_channels: channels,
        height: 1,
        width: length,
        out_channels: filters,
        kernel_h: 1,
        kernel_w: kernel,
        stride: 1,
        padding: 0,
    }
}

/// Published layer tables: the VGG-16 3×3 stack, ResNet-50 1×1 layers,
/// DenseNet 1×1 bottlenecks and the CNN-non-static text model.
pub fn preset(name: &str) -> Result<Vec<LayerSpec>> {
    let chwk = |c, h, k| ConvShape::chwk(c, h, h, k, 3, 1);
    let one = |c, h, k| ConvShape::chwk(c, h, h, k, 1, 0);
    Ok(match name {
        "vgg16" => [
            (3, 224, 64),
            (64, 224, 64),
            (64, 112, 128),
            (128, 112, 128),
            (128, 56, 256),
            (256, 56, 256),
            (256, 28, 512),
            (512, 28, 512),
            (512, 14, 512),
        ]
        .into_iter()
        .map(|(c, h, k)| LayerSpec::new(format!("vgg16/{c}x{h}x{h}x{k}"), chwk(c, h, k), 0.9))
        .collect(),
        "resnet-1x1" => vec![
            LayerSpec::new("resnet50/1x1x64->256", one(64, 56, 256), 0.9),
            LayerSpec::new("resnet50/1x1x256->64", one(256, 56, 64), 0.9),
        ],
        "densenet-1x1" => vec![
            LayerSpec::new("densenet121/dense_block_3/dense_layer_24", one(992, 14, 128), 0.875),
            LayerSpec::new("densenet121/dense_block_3/dense_layer_24", one(992, 14, 128), 0.91),
            LayerSpec::new("densenet161/dense_block_4/dense_layer_16", one(1776, 7, 192), 0.91),
            LayerSpec::new("densenet161/dense_block_3/dense_layer_16", one(1488, 14, 192), 0.93),
        ],
        "cnn-non-static" => [2, 3]
            .into_iter()
            .flat_map(|s| {
                [0.77, 0.83, 0.875]
                    .into_iter()
                    .map(move |sp| LayerSpec::new(format!("cnn-non-static/k{s}"), sequence_shape(300, 64, 100, s), sp))
            })
            .collect(),
        _ => return Err(config_err!("unknown preset `{name}`; expected one of {PRESETS:?}")),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub batch: usize,
    pub dtypes: Vec<DType>,
    pub algorithms: Vec<Algorithm>,
    /// Worker threads per timed run; 0 selects every hardware thread.
    pub workers: usize,
    pub timing: TimingConfig,
    pub seed: u64,
    /// Tune the sub-batch size; otherwise `sub_batch` is used.
    pub tune: bool,
    pub sub_batch: usize,
    /// Layers whose working set exceeds this are skipped.
    pub memory_budget_bytes: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            batch: 128,
            dtypes: vec![DType::F32, DType::F16],
            algorithms: Algorithm::ALL.to_vec(),
            workers: 0,
            timing: TimingConfig::new(2, 5),
            seed: 0,
            tune: true,
            sub_batch: 8,
            memory_budget_bytes: 2 << 30,
        }
    }
}

impl BenchOptions {
    fn checked(&self) -> Result<BenchOptions> {
        if self.batch == 0 {
            return Err(config_err!("batch must be positive"));
        }
        if let Some(d) = self.dtypes.iter().find(|d| **d == DType::F64) {
            return Err(config_err!("{d} is not a benchmark profile; use f32 or f16"));
        }
        if !SUB_BATCH_CANDIDATES.contains(&self.sub_batch) {
            return Err(config_err!("sub_batch {} not in {SUB_BATCH_CANDIDATES:?}", self.sub_batch));
        }
        let mut o = self.clone();
        o.timing = TimingConfig::new(o.timing.warmups, o.timing.repetitions.max(5));
        Ok(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub layer: String,
    pub sparsity: f64,
    pub algorithm: Algorithm,
    pub dtype: DType,
    pub sub_batch_size: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub iqr_ms: f64,
    pub min_ms: f64,
    pub repetitions: usize,
    pub macs: u64,
}

impl BenchRecord {
    fn new(spec: &LayerSpec, algorithm: Algorithm, dtype: DType, sub_batch_size: usize, t: &TimingStats, macs: u64) -> Self {
        BenchRecord {
            layer: spec.name.clone(),
            sparsity: spec.sparsity,
            algorithm,
            dtype,
            sub_batch_size,
            median_ms: t.median_ms,
            mean_ms: t.mean_ms,
            iqr_ms: t.iqr_ms,
            min_ms: t.min_ms,
            repetitions: t.repetitions,
            macs,
        }
    }
}

/// Records of one layer, or why it was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBench {
    pub records: Vec<BenchRecord>,
    pub note: Option<String>,
}

/// Seeded weights in which every output channel holds exactly
/// `round((1 − sparsity)·C·R·S)` nonzeros at random positions.
pub fn synthetic_weights(shape: &ConvShape, sparsity: f64, seed: u64) -> Tensor4D<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crs = shape.filter_volume();
    let nnz = ((1.0 - sparsity) * crs as f64).round() as usize;
    let mut w = Tensor4D::zeros(shape.weight_dims());
    for k in 0..shape.out_channels {
        let channel = &mut w.data_mut()[k * crs..(k + 1) * crs];
        for pos in sample(&mut rng, crs, nnz.min(crs)) {
            let mag = rng.random_range(0.1f32..1.0);
            channel[pos] = if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
    w
}

pub fn synthetic_input(shape: &ConvShape, batch: usize, seed: u64) -> Tensor4D<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
    Tensor4D::from_fn(shape.with_batch(batch).input_dims(), |_| rng.random_range(-1.0..1.0))
}

/// Bytes touched by one call of the largest algorithm.
pub fn working_set_bytes(shape: &ConvShape, batch: usize, dtype: DType) -> usize {
    let s = shape.with_batch(batch);
    let (e, f) = s.validate().unwrap_or((0, 0));
    let padded = batch * s.in_channels * s.padded_height() * s.padded_width();
    let out = batch * s.out_channels * e * f;
    let cols = s.filter_volume() * e * f;
    let weights = s.out_channels * s.filter_volume();
    // Inputs are widened to the accumulator type, so count 4 bytes for f16.
    let acc = dtype.size_of().max(4);
    (padded * 2 + out * 2 + cols + weights * 2) * acc
}

/// Relative tolerance for cross-checking algorithms at a storage type.
pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F16 => 1e-2,
        _ => 1e-4,
    }
}

fn check_output<T: Element>(name: &str, alg: Algorithm, reference: &Tensor4D<T>, got: &Tensor4D<T>) -> Result<()> {
    let err = max_rel_error(got.data(), reference.data());
    let tol = tolerance(T::DTYPE);
    if got.dims() != reference.dims() || !(err <= tol) {
        return Err(Error::Integrity(format!(
            "layer {name}: {alg} ({}) disagrees with dense-direct, relative error {err:.3e} > {tol:.0e}",
            T::DTYPE
        )));
    }
    Ok(())
}

fn bench_typed<T: Element>(
    spec: &LayerSpec,
    dense: &ConvLayerDense<f32>,
    kernel: &CsrKernel<f32>,
    x: &Tensor4D<f32>,
    opts: &BenchOptions,
    out: &mut Vec<BenchRecord>,
) -> Result<()> {
    let x: Tensor4D<T> = x.cast();
    let shape = dense.shape.with_batch(x.dims()[0]);
    let layer = ConvLayerDense::new(dense.weights.cast::<T>(), dense.bias.iter().map(|&b| T::from_f64(b as f64)).collect(), shape)?;
    let kernel: CsrKernel<T> = kernel.cast();
    let (e, f) = shape.validate()?;
    let outputs = (shape.batch * shape.out_channels * e * f) as u64;
    let dense_macs = outputs * shape.filter_volume() as u64;
    let reference = with_workers(opts.workers, || conv_dense_direct(&x, &layer))?;

    for &alg in &opts.algorithms {
        match alg {
            Algorithm::SparseDirect => {
                let (sb, stats) = if opts.tune {
                    let tuned = tune_sub_batch(&x, &kernel, &layer.bias, &SUB_BATCH_CANDIDATES, opts.workers, opts.timing)?;
                    let plan = EnginePlan::new(tuned.best, opts.workers, T::DTYPE)?;
                    check_output(&spec.name, alg, &reference, &conv_sparse_auto(&x, &kernel, &layer.bias, &plan)?)?;
                    let t = tuned.timings[&tuned.best].clone();
                    (tuned.best, t)
                } else {
                    let plan = EnginePlan::new(opts.sub_batch, opts.workers, T::DTYPE)?;
                    check_output(&spec.name, alg, &reference, &conv_sparse_auto(&x, &kernel, &layer.bias, &plan)?)?;
                    (opts.sub_batch, measure(opts.timing, || conv_sparse_auto(&x, &kernel, &layer.bias, &plan)))
                };
                let macs = outputs * kernel.sparse_level() as u64;
                out.push(BenchRecord::new(spec, alg, T::DTYPE, sb, &stats, macs));
            }
            Algorithm::DenseDirect => {
                let t = with_workers(opts.workers, || measure(opts.timing, || conv_dense_direct(&x, &layer)));
                out.push(BenchRecord::new(spec, alg, T::DTYPE, 0, &t, dense_macs));
            }
            Algorithm::DenseGemm => {
                let y = with_workers(opts.workers, || conv_dense_gemm(&x, &layer))?;
                check_output(&spec.name, alg, &reference, &y)?;
                let t = with_workers(opts.workers, || measure(opts.timing, || conv_dense_gemm(&x, &layer)));
                out.push(BenchRecord::new(spec, alg, T::DTYPE, 0, &t, dense_macs));
            }
        }
    }
    Ok(())
}

/// Times every requested algorithm and profile on explicit weights and a
/// prebuilt kernel. Each candidate's output is compared with dense-direct
/// first; a mismatch is an [`Error::Integrity`].
pub fn bench_layer_with(spec: &LayerSpec, dense: &ConvLayerDense<f32>, kernel: &CsrKernel<f32>, opts: &BenchOptions) -> Result<LayerBench> {
    spec.validate()?;
    let opts = opts.checked()?;
    let worst = opts.dtypes.iter().map(|&d| working_set_bytes(&spec.shape, opts.batch, d)).max().unwrap_or(0);
    if worst > opts.memory_budget_bytes {
        let note = format!(
            "layer {} skipped: needs ~{} MiB, budget {} MiB",
            spec.name,
            worst >> 20,
            opts.memory_budget_bytes >> 20
        );
        log::warn!("{note}");
        return Ok(LayerBench {
            records: Vec::new(),
            note: Some(note),
        });
    }
    let x = synthetic_input(&spec.shape, opts.batch, opts.seed);
    let mut records = Vec::new();
    for &dtype in &opts.dtypes {
        match dtype {
            DType::F32 => bench_typed::<f32>(spec, dense, kernel, &x, &opts, &mut records)?,
            DType::F16 => bench_typed::<f16>(spec, dense, kernel, &x, &opts, &mut records)?,
            DType::F64 => unreachable!("rejected by checked()"),
        }
    }
    Ok(LayerBench { records, note: None })
}

/// [`bench_layer_with`] on seeded synthetic weights at the layer's requested sparsity.
pub fn bench_layer(spec: &LayerSpec, opts: &BenchOptions) -> Result<LayerBench> {
    spec.validate()?;
    let w = synthetic_weights(&spec.shape, spec.sparsity, opts.seed);
    let kernel = build_csr(&w, &spec.shape)?;
    let dense = ConvLayerDense::without_bias(w, spec.shape)?;
    bench_layer_with(spec, &dense, &kernel, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sparsity: f64,
    pub sub_batch_size: usize,
    pub sparse: TimingStats,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub layer: String,
    pub points: Vec<SweepPoint>,
    pub dense_direct: Option<TimingStats>,
    pub dense_gemm: Option<TimingStats>,
    /// Interpolated sparsity where sparse time meets the best dense time;
    /// `None` if sparse never catches up in the measured range.
    pub crossover: Option<f64>,
    /// Spearman rank correlation of sparse time against sparsity.
    pub spearman: f64,
}

impl SweepResult {
    pub fn best_dense_ms(&self) -> f64 {
        [&self.dense_direct, &self.dense_gemm]
            .into_iter()
            .flatten()
            .map(|t| t.median_ms)
            .fold(f64::INFINITY, f64::min)
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// First sparsity at which `times` drops to `threshold`, interpolated
/// linearly between neighbouring points.
pub fn interpolate_crossover(sparsities: &[f64], times: &[f64], threshold: f64) -> Option<f64> {
    let i = times.iter().position(|&t| t <= threshold)?;
    if i == 0 {
        return Some(sparsities[0]);
    }
    let (s0, s1, t0, t1) = (sparsities[i - 1], sparsities[i], times[i - 1], times[i]);
    if t0 == t1 {
        return Some(s1);
    }
    Some(s0 + (t0 - threshold) * (s1 - s0) / (t0 - t1))
}

/// Times sparse-direct at each sparsity (f32) against the dense baselines,
/// which are measured once since they do not depend on sparsity.
pub fn sparsity_sweep(spec: &LayerSpec, sparsities: &[f64], opts: &BenchOptions) -> Result<SweepResult> {
    if sparsities.len() < 3 {
        return Err(config_err!("a sweep needs at least 3 sparsity points"));
    }
    let opts = opts.checked()?;
    let mut sorted = sparsities.to_vec();
    sorted.sort_by(f64::total_cmp);
    let x = synthetic_input(&spec.shape, opts.batch, opts.seed);
    let shape = spec.shape.with_batch(opts.batch);
    let (e, f) = shape.validate()?;
    let outputs = (opts.batch * shape.out_channels * e * f) as u64;

    let mut points = Vec::with_capacity(sorted.len());
    let mut baseline = None;
    for &s in &sorted {
        let point = LayerSpec {
            sparsity: s,
            ..spec.clone()
        };
        point.validate()?;
        let w = synthetic_weights(&spec.shape, s, opts.seed);
        let kernel = build_csr(&w, &spec.shape)?;
        let layer = ConvLayerDense::without_bias(w, shape)?;
        let bias = vec![0.0f32; shape.out_channels];
        // Dense-direct is the reference at the first point; later points are
        // checked against gemm, which is cheaper and already cross-checked.
        let mut reference = None;
        if baseline.is_none() {
            let direct = with_workers(opts.workers, || conv_dense_direct(&x, &layer))?;
            let dd = opts
                .algorithms
                .contains(&Algorithm::DenseDirect)
                .then(|| with_workers(opts.workers, || measure(opts.timing, || conv_dense_direct(&x, &layer))));
            let dg = if opts.algorithms.contains(&Algorithm::DenseGemm) {
                check_output(&spec.name, Algorithm::DenseGemm, &direct, &with_workers(opts.workers, || conv_dense_gemm(&x, &layer))?)?;
                Some(with_workers(opts.workers, || measure(opts.timing, || conv_dense_gemm(&x, &layer))))
            } else {
                None
            };
            baseline = Some((dd, dg));
            reference = Some(direct);
        }
        let reference = match reference {
            Some(r) => r,
            None => with_workers(opts.workers, || conv_dense_gemm(&x, &layer))?,
        };
        let sb = if opts.tune {
            tune_sub_batch(&x, &kernel, &bias, &SUB_BATCH_CANDIDATES, opts.workers, opts.timing)?.best
        } else {
            opts.sub_batch
        };
        let plan = EnginePlan::new(sb, opts.workers, DType::F32)?;
        check_output(&point.name, Algorithm::SparseDirect, &reference, &conv_sparse_auto(&x, &kernel, &bias, &plan)?)?;
        let t = measure(opts.timing, || conv_sparse_auto(&x, &kernel, &bias, &plan));
        points.push(SweepPoint {
            sparsity: s,
            sub_batch_size: sb,
            sparse: t,
            macs: outputs * kernel.sparse_level() as u64,
        });
    }
    let (dense_direct, dense_gemm) = baseline.expect("at least three points");
    let times: Vec<f64> = points.iter().map(|p| p.sparse.median_ms).collect();
    let mut result = SweepResult {
        layer: spec.name.clone(),
        spearman: spearman(&sorted, &times),
        points,
        dense_direct,
        dense_gemm,
        crossover: None,
    };
    result.crossover = interpolate_crossover(&sorted, &times, result.best_dense_ms());
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTiming {
    pub algorithm: Algorithm,
    pub dtype: DType,
    pub sub_batch_size: usize,
    pub median_ms: f64,
}

/// Execution choice for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub name: String,
    pub algorithm: Algorithm,
    pub dtype: DType,
    pub sub_batch_size: usize,
    pub worker_count: usize,
    pub sparsity: f64,
    pub candidates: Vec<CandidateTiming>,
    /// Sparsity at which sparse-direct would match the best dense time,
    /// extrapolated from the measurement assuming time ∝ stored entries.
    pub crossover_estimate: Option<f64>,
    pub note: Option<String>,
}

impl LayerChoice {
    pub fn dense_direct(name: impl Into<String>, sparsity: f64, note: Option<String>) -> Self {
        LayerChoice {
            name: name.into(),
            algorithm: Algorithm::DenseDirect,
            dtype: DType::F32,
            sub_batch_size: 1,
            worker_count: 0,
            sparsity,
            candidates: Vec::new(),
            crossover_estimate: None,
            note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub batch: usize,
    pub layers: Vec<LayerChoice>,
    /// Relative error of configured against all-dense inference when the
    /// configuration was verified.
    pub verified_rel_error: f64,
}

impl NetworkConfig {
    pub fn all_dense(model: &Model, batch: usize) -> Self {
        NetworkConfig {
            batch,
            layers: model
                .layers
                .iter()
                .map(|l| LayerChoice::dense_direct(&l.name, l.weights.sparsity(), None))
                .collect(),
            verified_rel_error: 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Fastest record by median; dense algorithms win ties.
pub fn select_fastest(records: &[BenchRecord]) -> Option<&BenchRecord> {
    records.iter().min_by(|a, b| {
        a.median_ms
            .total_cmp(&b.median_ms)
            .then(b.algorithm.is_dense().cmp(&a.algorithm.is_dense()))
    })
}

fn crossover_estimate(records: &[BenchRecord], density: f64) -> Option<f64> {
    let sparse = records.iter().filter(|r| r.algorithm == Algorithm::SparseDirect).map(|r| r.median_ms).fold(f64::INFINITY, f64::min);
    let dense = records.iter().filter(|r| r.algorithm.is_dense()).map(|r| r.median_ms).fold(f64::INFINITY, f64::min);
    if !(sparse.is_finite() && dense.is_finite()) || density <= 0.0 || sparse <= 0.0 {
        return None;
    }
    let s = 1.0 - density * dense / sparse;
    (0.0..=1.0).contains(&s).then_some(s)
}

/// Relative tolerance for configured-vs-dense end-to-end agreement.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Benchmarks every layer of `model` on its real weights, picks the fastest
/// algorithm per layer and verifies the configured network against all-dense
/// inference on `check_input`.
pub fn configure_network(model: &Model, check_input: &Tensor4D<f32>, opts: &BenchOptions) -> Result<NetworkConfig> {
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let spec = LayerSpec {
            name: layer.name.clone(),
            shape: layer.shape,
            sparsity: layer.weights.sparsity(),
            source: LayerSource::ModelFile,
        };
        let dense = ConvLayerDense::new(layer.weights.dense()?.into_owned(), layer.bias.clone(), layer.shape)?;
        let kernel = layer.weights.csr(&layer.shape)?;
        let density = kernel.sparse_level() as f64 / layer.shape.filter_volume() as f64;
        let bench = match bench_layer_with(&spec, &dense, &kernel, opts) {
            Ok(b) => b,
            Err(e @ Error::Integrity(_)) => return Err(e),
            Err(e) => LayerBench {
                records: Vec::new(),
                note: Some(format!("layer {} not measurable: {e}", layer.name)),
            },
        };
        let choice = match select_fastest(&bench.records) {
            Some(best) => LayerChoice {
                name: layer.name.clone(),
                algorithm: best.algorithm,
                dtype: best.dtype,
                sub_batch_size: best.sub_batch_size.max(1),
                worker_count: opts.workers,
                sparsity: spec.sparsity,
                candidates: bench
                    .records
                    .iter()
                    .map(|r| CandidateTiming {
                        algorithm: r.algorithm,
                        dtype: r.dtype,
                        sub_batch_size: r.sub_batch_size,
                        median_ms: r.median_ms,
                    })
                    .collect(),
                crossover_estimate: crossover_estimate(&bench.records, density),
                note: bench.note,
            },
            None => {
                let note = bench.note.unwrap_or_else(|| format!("layer {}: no timings", layer.name));
                log::warn!("{note}; defaulting to dense-direct");
                LayerChoice::dense_direct(&layer.name, spec.sparsity, Some(note))
            }
        };
        layers.push(choice);
    }
    let mut cfg = NetworkConfig {
        batch: opts.batch,
        layers,
        verified_rel_error: 0.0,
    };
    cfg.verified_rel_error = verify_config(model, &cfg, check_input)?;
    Ok(cfg)
}

/// Runs configured and all-dense inference and returns their relative
/// difference, failing with [`Error::Integrity`] above tolerance.
pub fn verify_config(model: &Model, cfg: &NetworkConfig, x: &Tensor4D<f32>) -> Result<f64> {
    let configured = model.forward(x, Some(cfg))?;
    let dense = model.forward(x, None)?;
    let err = max_rel_error(&configured, &dense);
    let tol = if cfg.layers.iter().any(|l| l.dtype == DType::F16) {
        tolerance(DType::F16)
    } else {
        END_TO_END_TOLERANCE
    };
    if !(err <= tol) {
        return Err(Error::Integrity(format!(
            "configured inference differs from dense inference: relative error {err:.3e} > {tol:.0e}"
        )));
    }
    Ok(err)
}

/// Validation images of a model's own dataset, or seeded noise when the
/// model carries no dataset description.
pub fn check_batch(model: &Model, data: Option<&Dataset>, batch: usize, seed: u64) -> Tensor4D<f32> {
    match data {
        Some(d) if !d.is_empty() => {
            let idx: Vec<usize> = (0..batch.min(d.len())).collect();
            d.to_tensor(&idx)
        }
        _ => {
            let [c, h, w] = model.spec.input;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor4D::from_fn([batch, c, h, w], |_| rng.random_range(-1.0..1.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            _ => Err(config_err!("unknown report format `{s}`")),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension; CSV by default.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            Some("md") => ReportFormat::Markdown,
            _ => ReportFormat::Csv,
        }
    }
}

pub const REPORT_COLUMNS: [&str; 7] = ["layer", "sparsity", "subBatchSize", "sparse-f32", "dense-f32", "sparse-f16", "dense-f16"];

/// One report row: a layer at one sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    /// Percent.
    pub sparsity: f64,
    #[serde(rename = "subBatchSize")]
    pub sub_batch_size: Option<usize>,
    #[serde(rename = "sparse-f32")]
    pub sparse_f32: Option<f64>,
    #[serde(rename = "dense-f32")]
    pub dense_f32: Option<f64>,
    #[serde(rename = "sparse-f16")]
    pub sparse_f16: Option<f64>,
    #[serde(rename = "dense-f16")]
    pub dense_f16: Option<f64>,
}

/// Pivots records into rows keyed by (layer, sparsity) in first-seen order.
/// Dense columns hold the faster of dense-direct and dense-gemm.
pub fn report_rows(records: &[BenchRecord]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for r in records {
        let pct = (r.sparsity * 1e4).round() / 100.0;
        let pos = rows.iter().position(|row| row.layer == r.layer && row.sparsity == pct);
        let row = match pos {
            Some(i) => &mut rows[i],
            None => {
                rows.push(ReportRow {
                    layer: r.layer.clone(),
                    sparsity: pct,
                    sub_batch_size: None,
                    sparse_f32: None,
                    dense_f32: None,
                    sparse_f16: None,
                    dense_f16: None,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        let slot = match (r.algorithm.is_dense(), r.dtype) {
            (false, DType::F16) => &mut row.sparse_f16,
            (false, _) => &mut row.sparse_f32,
            (true, DType::F16) => &mut row.dense_f16,
            (true, _) => &mut row.dense_f32,
        };
        *slot = Some(slot.map_or(r.median_ms, |v: f64| v.min(r.median_ms)));
        if !r.algorithm.is_dense() && (r.dtype == DType::F32 || row.sub_batch_size.is_none()) {
            row.sub_batch_size = Some(r.sub_batch_size);
        }
    }
    let round = |v: &mut Option<f64>| *v = v.map(|ms| (ms * 1e4).round() / 1e4);
    for row in &mut rows {
        round(&mut row.sparse_f32);
        round(&mut row.dense_f32);
        round(&mut row.sparse_f16);
        round(&mut row.dense_f16);
    }
    rows
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn render_report(records: &[BenchRecord], format: ReportFormat) -> Result<String> {
    let rows = report_rows(records);
    let cells = |r: &ReportRow| {
        [
            r.layer.clone(),
            r.sparsity.to_string(),
            cell(r.sub_batch_size),
            cell(r.sparse_f32),
            cell(r.dense_f32),
            cell(r.sparse_f16),
            cell(r.dense_f16),
        ]
    };
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(&rows)? + "\n",
        ReportFormat::Csv => {
            let mut s = REPORT_COLUMNS.join(",") + "\n";
            for r in &rows {
                s += &cells(r).map(|c| if c.contains(',') { format!("\"{c}\"") } else { c }).join(",");
                s.push('\n');
            }
            s
        }
        ReportFormat::Markdown => {
            let mut s = format!("| {} |\n", REPORT_COLUMNS.join(" | "));
            s += &format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len()));
            for r in &rows {
                s += &format!("| {} |\n", cells(r).join(" | "));
            }
            s
        }
    })
}

pub fn emit_report(records: &[BenchRecord], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(records, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
