//! The sparse engine produces identical bits whatever the sub-batch size or
//! worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseconv_core::engine::SUB_BATCH_CANDIDATES;
use sparseconv_core::harness::{sequence_shape, synthetic_input, synthetic_weights};
use sparseconv_core::pool::max_workers;
use sparseconv_core::*;

fn bits<T: Element>(t: &Tensor4D<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_f64().to_bits()).collect()
}

fn assert_plan_invariant<T: Element>(x: &Tensor4D<T>, kernel: &CsrKernel<T>, bias: &[T]) {
    let reference = bits(&conv_sparse(x, kernel, bias, &EnginePlan::new(1, 1, T::DTYPE).unwrap()).unwrap());
    for sb in SUB_BATCH_CANDIDATES {
        for workers in [1, 2, max_workers()] {
            let plan = EnginePlan::new(sb, workers, T::DTYPE).unwrap();
            let y = conv_sparse(x, kernel, bias, &plan).unwrap();
            assert!(bits(&y) == reference, "{:?}: sub-batch {sb} workers {workers} changed the output", kernel.shape());
        }
    }
}

fn shapes() -> Vec<ConvShape> {
    vec![
        // Small planes: channel-major block path for every sub-batch.
        ConvShape::chwk(16, 8, 8, 12, 3, 1),
        // Planes too large to block: per-image wide rows.
        ConvShape::chwk(3, 70, 66, 4, 3, 1),
        // Strided.
        ConvShape::chwk(8, 15, 15, 6, 3, 1).with_stride(2),
        ConvShape::chwk(6, 10, 10, 5, 1, 0),
        sequence_shape(20, 33, 7, 2),
    ]
}

#[test]
fn f32_output_is_plan_and_worker_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for shape in shapes() {
        for sparsity in [0.0, 0.77, 0.95] {
            let batch = rng.random_range(5..=19);
            let x = synthetic_input(&shape, batch, rng.random());
            let w = synthetic_weights(&shape, sparsity, rng.random());
            let kernel = build_csr(&w, &shape).unwrap();
            let bias: Vec<f32> = (0..shape.out_channels).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_plan_invariant(&x, &kernel, &bias);
        }
    }
}

#[test]
fn f16_output_is_plan_and_worker_invariant() {
    let shape = ConvShape::chwk(12, 9, 9, 10, 3, 1);
    let x: Tensor4D<f16> = synthetic_input(&shape, 11, 5).cast();
    let kernel: CsrKernel<f16> = build_csr(&synthetic_weights(&shape, 0.83, 5), &shape).unwrap().cast();
    assert_plan_invariant(&x, &kernel, &[f16::from_f32(0.5); 10]);
}

#[test]
fn repeated_runs_are_identical() {
    let shape = ConvShape::chwk(32, 14, 14, 32, 3, 1);
    let x = synthetic_input(&shape, 8, 1);
    let kernel = build_csr(&synthetic_weights(&shape, 0.9, 1), &shape).unwrap();
    let plan = EnginePlan::new(4, 0, DType::F32).unwrap();
    let first = bits(&conv_sparse(&x, &kernel, &[0.0; 32], &plan).unwrap());
    for _ in 0..5 {
        assert!(bits(&conv_sparse(&x, &kernel, &[0.0; 32], &plan).unwrap()) == first);
    }
}
