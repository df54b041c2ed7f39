mod common;

use cnnxray::tensor::{
    batchnorm_infer, conv2d, global_avg_pool, maxpool2d, relu, residual_add, BatchNormParams, ConvParams, PoolParams,
    Shape4, Tensor,
};
use common::naive_conv;
use proptest::prelude::*;

fn tensor(shape: Shape4) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-2.0f32..2.0, shape.len()).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

#[derive(Debug, Clone)]
struct ConvCase {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    input: Vec<f32>,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..=8, 1usize..=8, 1usize..=8, 1usize..=8, 1usize..=3, 1usize..=3, 0usize..=2, 0usize..=2)
        .prop_flat_map(|(c, h, w, o, sh, sw, ph, pw)| {
            let kh_max = (h + 2 * ph).min(8);
            let kw_max = (w + 2 * pw).min(8);
            (1..=kh_max, 1..=kw_max).prop_flat_map(move |(kh, kw)| {
                let scale = 1.0 / ((c * kh * kw) as f32).sqrt();
                (
                    proptest::collection::vec(-1.0f32..1.0, c * h * w),
                    proptest::collection::vec(-scale..scale, o * c * kh * kw),
                    proptest::collection::vec(-0.5f32..0.5, o),
                )
                    .prop_map(move |(input, weights, bias)| ConvCase {
                        c,
                        h,
                        w,
                        o,
                        kh,
                        kw,
                        stride: (sh, sw),
                        pad: (ph, pw),
                        input,
                        weights,
                        bias,
                    })
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv_matches_naive_oracle(case in conv_case()) {
        let x = Tensor::new(Shape4::new(1, case.c, case.h, case.w), case.input.clone()).unwrap();
        let wt = Tensor::new(Shape4::new(case.o, case.c, case.kh, case.kw), case.weights.clone()).unwrap();
        let params = ConvParams::new(wt, case.bias.clone(), case.stride, case.pad).unwrap();
        let got = conv2d(&x, &params).unwrap();
        let (want, oh, ow) = naive_conv(
            &case.input,
            (case.c, case.h, case.w),
            &case.weights,
            (case.o, case.kh, case.kw),
            &case.bias,
            case.stride,
            case.pad,
        );
        prop_assert_eq!(got.shape(), Shape4::new(1, case.o, oh, ow));
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
        // Repeating the call is bit-identical.
        prop_assert_eq!(conv2d(&x, &params).unwrap(), got);
    }

    #[test]
    fn relu_is_idempotent(t in tensor(Shape4::new(2, 3, 4, 5))) {
        let once = relu(&t);
        prop_assert_eq!(relu(&once), once.clone());
        prop_assert!(once.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn maxpool_of_constant_is_constant(
        v in -5.0f32..5.0,
        h in 2usize..10,
        w in 2usize..10,
        k in 1usize..3,
        s in 1usize..3,
        ceil in any::<bool>(),
    ) {
        let t = Tensor::filled(Shape4::new(1, 2, h, w), v);
        let mut pool = PoolParams::new((k, k), (s, s));
        pool.ceil_mode = ceil;
        let out = maxpool2d(&t, &pool).unwrap();
        prop_assert!(out.data().iter().all(|&x| x == v));
    }

    #[test]
    fn maxpool_dominates_window_mean(t in tensor(Shape4::new(1, 2, 6, 6))) {
        let out = maxpool2d(&t, &PoolParams::new((2, 2), (2, 2))).unwrap();
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let m = out.get(0, c, y, x);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            prop_assert!(m >= t.get(0, c, 2 * y + dy, 2 * x + dx));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unit_batchnorm_is_identity(t in tensor(Shape4::new(2, 3, 4, 4))) {
        let bn = BatchNormParams::new(vec![1.0; 3], vec![0.0; 3], vec![0.0; 3], vec![1.0; 3], 0.0).unwrap();
        prop_assert_eq!(batchnorm_infer(&t, &bn).unwrap(), t);
    }

    #[test]
    fn gap_is_linear_over_residual_add(
        a in tensor(Shape4::new(1, 4, 5, 3)),
        b in tensor(Shape4::new(1, 4, 5, 3)),
    ) {
        let sum = global_avg_pool(&residual_add(&a, &b).unwrap());
        let (ga, gb) = (global_avg_pool(&a), global_avg_pool(&b));
        for ((s, x), y) in sum.iter().zip(&ga).zip(&gb) {
            prop_assert!((s - (x + y)).abs() <= 1e-6);
        }
    }
}
