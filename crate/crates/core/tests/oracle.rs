//! Sparse engine and both dense baselines against a naive f64 convolution
//! written out here, over randomized layer geometries.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseconv_core::engine::SUB_BATCH_CANDIDATES;
use sparseconv_core::*;

const SPARSITIES: [f64; 6] = [0.0, 0.5, 0.77, 0.9, 0.95, 1.0];
const KERNELS: [usize; 4] = [1, 2, 3, 5];

fn naive_conv(x: &[f64], w: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
    let (n, c, h, wd, k) = (s.batch, s.in_channels, s.height, s.width, s.out_channels);
    let (r, sk, st, p) = (s.kernel_h, s.kernel_w, s.stride, s.padding as isize);
    let e = (h + 2 * s.padding - r) / st + 1;
    let f = (wd + 2 * s.padding - sk) / st + 1;
    let mut y = vec![0.0; n * k * e * f];
    for img in 0..n {
        for kk in 0..k {
            for oy in 0..e {
                for ox in 0..f {
                    let mut acc = bias[kk];
                    for cc in 0..c {
                        for ry in 0..r {
                            for sx in 0..sk {
                                let iy = (oy * st + ry) as isize - p;
                                let ix = (ox * st + sx) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((img * c + cc) * h + iy as usize) * wd + ix as usize];
                                acc += w[((kk * c + cc) * r + ry) * sk + sx] * xv;
                            }
                        }
                    }
                    y[((img * k + kk) * e + oy) * f + ox] = acc;
                }
            }
        }
    }
    y
}

fn rel_error(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn random_shape(rng: &mut ChaCha8Rng) -> ConvShape {
    loop {
        let s = ConvShape {
            batch: rng.random_range(1..=4),
            in_channels: rng.random_range(1..=32),
            height: rng.random_range(1..=32),
            width: rng.random_range(1..=32),
            out_channels: rng.random_range(1..=32),
            kernel_h: *KERNELS.choose(rng).unwrap(),
            kernel_w: *KERNELS.choose(rng).unwrap(),
            stride: rng.random_range(1..=2),
            padding: rng.random_range(0..=2),
        };
        if s.validate().is_ok() {
            return s;
        }
    }
}

/// Weights with exactly `round(sparsity · len)` zeros at random positions.
fn random_weights(rng: &mut ChaCha8Rng, len: usize, sparsity: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    for &i in &idx[..(sparsity * len as f64).round() as usize] {
        w[i] = 0.0;
    }
    w
}

struct Case {
    shape: ConvShape,
    x: Vec<f64>,
    w: Vec<f64>,
    bias: Vec<f64>,
    plan_sub_batch: usize,
    workers: usize,
}

fn random_case(rng: &mut ChaCha8Rng, sparsity: f64) -> Case {
    let shape = random_shape(rng);
    Case {
        x: (0..shape.input_dims().iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        w: random_weights(rng, shape.weight_dims().iter().product(), sparsity),
        bias: (0..shape.out_channels).map(|_| rng.random_range(-0.5..0.5)).collect(),
        plan_sub_batch: *SUB_BATCH_CANDIDATES.choose(rng).unwrap(),
        workers: rng.random_range(1..=2),
        shape,
    }
}

/// Runs all three kernels on `T` storage and returns their outputs widened to
/// f64 together with the oracle evaluated on the `T`-rounded operands.
fn run_case<T: Element>(c: &Case) -> [Vec<f64>; 4] {
    let cast = |v: &[f64]| v.iter().map(|&a| T::from_f64(a)).collect::<Vec<T>>();
    let back = |v: &[T]| v.iter().map(|a| a.to_f64()).collect::<Vec<f64>>();
    let x = Tensor4D::from_vec(c.shape.input_dims(), cast(&c.x)).unwrap();
    let w = Tensor4D::from_vec(c.shape.weight_dims(), cast(&c.w)).unwrap();
    let bias = cast(&c.bias);
    let oracle = naive_conv(&back(x.data()), &back(w.data()), &back(&bias), &c.shape);

    let kernel = build_csr(&w, &c.shape).unwrap();
    let plan = EnginePlan::new(c.plan_sub_batch, c.workers, T::DTYPE).unwrap();
    let sparse = conv_sparse(&x, &kernel, &bias, &plan).unwrap();
    let layer = ConvLayerDense::new(w, bias, c.shape).unwrap();
    let direct = conv_dense_direct(&x, &layer).unwrap();
    let gemm = conv_dense_gemm(&x, &layer).unwrap();
    [oracle, back(sparse.data()), back(direct.data()), back(gemm.data())]
}

fn check_all<T: Element>(tol: f64, cases: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cases {
        let sparsity = SPARSITIES[i % SPARSITIES.len()];
        let case = random_case(&mut rng, sparsity);
        let [oracle, sparse, direct, gemm] = run_case::<T>(&case);
        for (name, got) in [("sparse", &sparse), ("dense-direct", &direct), ("dense-gemm", &gemm)] {
            let err = rel_error(got, &oracle);
            assert!(
                err <= tol,
                "case {i} ({:?}, sparsity {sparsity}, sub-batch {}): {name} off by {err:e}",
                case.shape,
                case.plan_sub_batch
            );
        }
    }
}

#[test]
fn f32_kernels_match_naive_convolution() {
    check_all::<f32>(1e-4, 240, 0xC0FFEE);
}

#[test]
fn f16_storage_matches_naive_convolution() {
    check_all::<f16>(1e-2, 240, 0xF16);
}

#[test]
fn sequence_layers_match_naive_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, &sparsity) in SPARSITIES.iter().cycle().take(30).enumerate() {
        let shape = harness::sequence_shape(rng.random_range(1..=40), rng.random_range(2..=64), rng.random_range(1..=24), rng.random_range(1..=2))
            .with_batch(rng.random_range(1..=5));
        let case = Case {
            x: (0..shape.input_dims().iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            w: random_weights(&mut rng, shape.weight_dims().iter().product(), sparsity),
            bias: vec![0.25; shape.out_channels],
            plan_sub_batch: SUB_BATCH_CANDIDATES[i % 5],
            workers: 1,
            shape,
        };
        let [oracle, ..] = run_case::<f32>(&case);
        let x = Tensor4D::from_vec(shape.input_dims(), case.x.iter().map(|&v| v as f32).collect()).unwrap();
        let w = Tensor4D::from_vec(shape.weight_dims(), case.w.iter().map(|&v| v as f32).collect()).unwrap();
        let kernel = build_csr(&w, &shape).unwrap();
        let plan = EnginePlan::new(case.plan_sub_batch, 1, DType::F32).unwrap();
        let y = conv_sparse_1d(&x, &kernel, &case.bias.iter().map(|&b| b as f32).collect::<Vec<_>>(), &plan).unwrap();
        let got: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        assert!(rel_error(&got, &oracle) <= 1e-4, "sequence case {i} {shape:?}");
    }
}
