use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::suite::random_array;
use super::*;

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::new(shape, data.to_vec()).unwrap()
}

/// Triple-loop product used as the matmul oracle.
fn naive_matmul(a: &Array, b: &Array) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_two_by_two() {
    let mut g = Graph::new();
    let a = arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = arr(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    assert_eq!(naive_matmul(&a, &b), vec![19.0, 22.0, 43.0, 50.0]);
    let (av, bv) = (g.constant(a), g.constant(b));
    let c = g.matmul(av, bv).unwrap();
    assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_agrees_with_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, k, n) in [(1, 1, 1), (3, 7, 2), (17, 9, 33), (64, 27, 40)] {
        let a = random_array(&mut rng, &[m, k], -1.0, 1.0);
        let b = random_array(&mut rng, &[k, n], -1.0, 1.0);
        let expected = naive_matmul(&a, &b);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.data(c).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn relu_and_softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Array::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);
    for c in [-50.0, 0.0, 3.5, 700.0] {
        let x = g.constant(Array::from_vec(vec![c; 3]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Array::from_vec(vec![3.0]).requiring_grad());
    let xx = g.mul(x, x).unwrap();
    let loss = g.sum(xx).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    let mut g = Graph::new();
    let a = g.leaf(Array::from_vec(vec![1.0, -2.0, 5.0]).requiring_grad());
    let b = g.leaf(Array::from_vec(vec![0.5, 0.5, 0.5]).requiring_grad());
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0; 3]);
    assert_eq!(g.grad(b).unwrap(), &[1.0; 3]);

    let mut g = Graph::new();
    let x = g.leaf(Array::from_vec(vec![0.0]).requiring_grad());
    let s = g.sigmoid(x).unwrap();
    let loss = g.sum(s).unwrap();
    g.backward(loss).unwrap();
    let sig0 = sigmoid(0.0);
    assert!((g.grad(x).unwrap()[0] - sig0 * (1.0 - sig0)).abs() < 1e-15);
    assert_eq!(g.grad(x).unwrap()[0], 0.25);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Array::from_vec(vec![3.0]).requiring_grad());
    let xx = g.mul(x, x).unwrap();
    let loss = g.sum(xx).unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Array::from_vec(vec![1.0, 2.0]).requiring_grad());
    let y = g.mul_scalar(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(GradError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Array::zeros(&[2, 3]));
    let b = g.constant(Array::zeros(&[2, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn strict_mode_rejects_non_finite() {
    let mut g = Graph::strict();
    let a = g.constant(Array::from_vec(vec![1.0, f64::NAN]));
    assert!(matches!(g.relu(a), Err(GradError::NonFinite { op: "relu" })));
    let mut lax = Graph::new();
    let a = lax.constant(Array::from_vec(vec![1.0, f64::NAN]));
    assert!(lax.relu(a).is_ok());
}

#[test]
fn array_rejects_bad_shapes() {
    assert!(Array::new(&[2, 2], vec![0.0; 3]).is_err());
    assert!(Array::new(&[0], vec![]).is_err());
    let a = Array::zeros(&[2]).requiring_grad();
    assert_eq!(a.grad().unwrap().len(), 2);
}

#[test]
fn grad_check_square() {
    let x = Array::from_vec(vec![3.0]);
    let err = grad_check(
        |g, x| {
            let y = g.mul(x, x)?;
            g.sum(y)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn grad_check_softmax_dot() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_array(&mut rng, &[8], -2.0, 2.0);
    let w = random_array(&mut rng, &[8], -1.0, 1.0);
    let err = grad_check(
        move |g, x| {
            let s = g.softmax(x, 0)?;
            let wv = g.constant(w.clone());
            let p = g.mul(s, wv)?;
            g.sum(p)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn grad_check_conv3x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_array(&mut rng, &[1, 1, 5, 5], -1.0, 1.0);
    let k = random_array(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
    let err = grad_check(
        move |g, x| {
            let kv = g.constant(k.clone());
            let y = g.conv2d(x, kv, None, 1, 1)?;
            g.sum(y)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn grad_check_rejects_bad_step_and_non_scalar() {
    let x = Array::from_vec(vec![1.0, 2.0]);
    assert!(grad_check(|g, x| g.sum(x), &x, 0.1).is_err());
    assert!(grad_check(|g, x| g.sum(x), &x, 0.0).is_err());
    assert!(matches!(
        grad_check(|g, x| g.relu(x), &x, 1e-6),
        Err(GradError::NonScalarLoss(_))
    ));
}

#[test]
fn primitive_suite_passes_on_a_few_seeds() {
    for report in primitive_suite(3, 1e-6).unwrap() {
        assert!(report.max_error <= 1e-5, "{}: {}", report.name, report.max_error);
    }
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_array(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let k = random_array(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    for stride in [1, 2] {
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, None, stride, 1).unwrap();
        let s = g.shape(y).to_vec();
        let (ho, wo) = (s[1], s[2]);
        for o in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && iy < 5 && ix < 4 {
                                    acc += x.data()[(c * 5 + iy as usize) * 4 + ix as usize]
                                        * k.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = g.data(y)[(o * ho + oy) * wo + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn max_pool_uses_ceil_extents() {
    let mut g = Graph::new();
    let x = g.constant(Array::new(&[1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
    assert_eq!(g.data(y), &[4.0, 5.0, 7.0, 8.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_array(&mut rng, &[4, 9, 9], -1.0, 1.0);
        let k = random_array(&mut rng, &[6, 4, 3, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x), g.constant(k));
        let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
        let y = g.max_pool2(y).unwrap();
        let y = g.reshape(y, &[6, 25]).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.data(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in proptest::collection::vec(-30.0f64..30.0, 12),
        axis in 0usize..2,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Array::new(&[3, 4], data).unwrap());
        let s = g.softmax(x, axis).unwrap();
        let v = g.data(s);
        prop_assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        if axis == 1 {
            for r in 0..3 {
                let t: f64 = v[r * 4..(r + 1) * 4].iter().sum();
                prop_assert!((t - 1.0).abs() <= 1e-12);
            }
        } else {
            for c in 0..4 {
                let t: f64 = (0..3).map(|r| v[r * 4 + c]).sum();
                prop_assert!((t - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_is_exact_on_affine_fields(
        a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
        px in 0.0f64..6.0, py in 0.0f64..4.0,
    ) {
        let (h, w) = (5, 7);
        let field: Vec<f64> = (0..h * w)
            .map(|i| a * (i % w) as f64 + b * (i / w) as f64 + c)
            .collect();
        let mut g = Graph::new();
        let x = g.constant(Array::new(&[1, h, w], field).unwrap());
        let s = g.bilinear_sample(x, &[(px, py)]).unwrap();
        let expected = a * px + b * py + c;
        prop_assert!((g.data(s)[0] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }
}
