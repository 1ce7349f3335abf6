//! Unified-sparsity CSR against per-channel (ragged) CSR on layers whose
//! channels carry very different nonzero counts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sparseconv_bench::skewed_weights;
use sparseconv_core::engine::ragged::{build_ragged, conv_sparse_ragged};
use sparseconv_core::harness::synthetic_input;
use sparseconv_core::{build_csr, conv_sparse, ConvShape, DType, EnginePlan};

fn unified_vs_ragged(c: &mut Criterion) {
    let shape = ConvShape::chwk(64, 28, 28, 64, 3, 1);
    let x = synthetic_input(&shape, 8, 3);
    let bias = vec![0.0; shape.out_channels];
    let plan = EnginePlan::new(8, 0, DType::F32).unwrap();
    let mut g = c.benchmark_group("unified-vs-ragged");
    g.sample_size(10);
    for max_density in [0.1, 0.3] {
        let w = skewed_weights(&shape, max_density);
        let unified = build_csr(&w, &shape).unwrap();
        let ragged = build_ragged(&w, &shape).unwrap();
        g.bench_with_input(BenchmarkId::new("unified", max_density), &unified, |b, k| {
            b.iter(|| conv_sparse(&x, k, &bias, &plan).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("ragged", max_density), &ragged, |b, k| {
            b.iter(|| conv_sparse_ragged(&x, k, &bias, &plan).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, unified_vs_ragged);
criterion_main!(benches);
