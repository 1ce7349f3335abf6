//! Structural invariants of unified-sparsity CSR kernels over random weights.

use proptest::prelude::*;
use sparseconv_core::*;

#[derive(Debug, Clone)]
struct Layer {
    shape: ConvShape,
    weights: Vec<f32>,
    input: Vec<f32>,
}

fn weight_value() -> impl Strategy<Value = f32> {
    prop_oneof![
        4 => Just(0.0f32),
        1 => Just(-0.0f32),
        5 => -2.0f32..2.0,
    ]
}

fn layer() -> impl Strategy<Value = Layer> {
    (1usize..=6, 1usize..=5, 1usize..=3, 1usize..=3, 0usize..=1, 1usize..=2, 3usize..=6, 3usize..=6, 1usize..=2)
        .prop_map(|(k, c, r, s, padding, stride, h, w, n)| ConvShape {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: r,
            kernel_w: s,
            stride,
            padding,
        })
        .prop_filter("geometry must tile", |s| s.validate().is_ok())
        .prop_flat_map(|shape| {
            let wl: usize = shape.weight_dims().iter().product();
            let xl: usize = shape.input_dims().iter().product();
            (
                Just(shape),
                prop::collection::vec(weight_value(), wl),
                prop::collection::vec(-1.0f32..1.0, xl),
            )
        })
        .prop_map(|(shape, weights, input)| Layer { shape, weights, input })
}

/// Output computed from the true nonzeros only, in f64.
fn nonzero_only_conv(l: &Layer) -> Vec<f64> {
    let s = &l.shape;
    let (e, f) = s.validate().unwrap();
    let (c, h, w, k) = (s.in_channels, s.height, s.width, s.out_channels);
    let (r, sk) = (s.kernel_h, s.kernel_w);
    let mut y = vec![0.0; s.batch * k * e * f];
    for n in 0..s.batch {
        for kk in 0..k {
            for cc in 0..c {
                for ry in 0..r {
                    for sx in 0..sk {
                        let wv = l.weights[((kk * c + cc) * r + ry) * sk + sx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..e {
                            for ox in 0..f {
                                let iy = (oy * s.stride + ry) as isize - s.padding as isize;
                                let ix = (ox * s.stride + sx) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = l.input[((n * c + cc) * h + iy as usize) * w + ix as usize];
                                y[((n * k + kk) * e + oy) * f + ox] += wv as f64 * xv as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn unified_csr_invariants(l in layer()) {
        let s = l.shape;
        let w = Tensor4D::from_vec(s.weight_dims(), l.weights.clone()).unwrap();
        let kernel = build_csr(&w, &s).unwrap();
        let level = kernel.sparse_level();
        let volume = s.filter_volume();

        // Every channel stores the same number of entries: the largest nonzero
        // count of any channel.
        let max_nnz = l.weights.chunks(volume).map(|ch| ch.iter().filter(|v| **v != 0.0).count()).max().unwrap();
        prop_assert_eq!(level, max_nnz);
        prop_assert_eq!(kernel.rowptr().len(), s.out_channels + 1);
        for d in kernel.rowptr().windows(2) {
            prop_assert_eq!((d[1] - d[0]) as usize, level);
        }

        for k in 0..s.out_channels {
            let (values, cols) = kernel.channel(k);
            prop_assert!(cols.windows(2).all(|p| p[0] < p[1]), "colidx not strictly increasing in channel {}", k);
            let channel = &l.weights[k * volume..(k + 1) * volume];
            for (&v, &col) in values.iter().zip(cols) {
                let (c, r, sx) = kernel.decode_offset(col).expect("decodable offset");
                prop_assert_eq!(col as usize, c * s.padded_height() * s.padded_width() + r * s.padded_width() + sx);
                let original = channel[(c * s.kernel_h + r) * s.kernel_w + sx];
                if v == 0.0 {
                    // A padding entry: canonical +0 on a position that was zero.
                    prop_assert_eq!(v.to_bits(), 0u32);
                    prop_assert_eq!(original, 0.0);
                } else {
                    prop_assert_eq!(v.to_bits(), original.to_bits());
                }
            }
        }

        // Round trip is bit-exact up to the sign of zero.
        let back = decompress(&kernel).unwrap();
        for (a, b) in back.data().iter().zip(&l.weights) {
            let canonical = if *b == 0.0 { 0.0f32 } else { *b };
            prop_assert_eq!(a.to_bits(), canonical.to_bits());
        }

        // Stored padding zeros leave the convolution unchanged.
        let x = Tensor4D::from_vec(s.input_dims(), l.input.clone()).unwrap();
        let bias = vec![0.0f32; s.out_channels];
        let y = conv_sparse(&x, &kernel, &bias, &EnginePlan::new(1, 1, DType::F32).unwrap()).unwrap();
        let want = nonzero_only_conv(&l);
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }
}
