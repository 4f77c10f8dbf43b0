use qseg_core::rng::Rng;
use qseg_core::tensor::{grad_check, Conv2dSpec};
use qseg_core::{Graph, Tensor, TensorError};

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(2));
    let ii = g.matmul(i, i).unwrap();
    assert_eq!(g.value(ii), &Tensor::eye(2));

    let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.constant(t(&[&[0.0], &[1.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &t(&[&[2.0], &[4.0]]));

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let az = g.matmul(a, z).unwrap();
    assert_eq!(g.value(az), &Tensor::zeros(&[2, 3]));
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn conv2d_examples() {
    let mut rng = Rng::seed(3);
    let mut g = Graph::new();
    let x = g.constant(rng.uniform_tensor(&[2, 4, 5], -1.0, 1.0));
    // 1x1 identity kernel per channel.
    let mut w = Tensor::zeros(&[2, 2, 1, 1]);
    w.data_mut()[0] = 1.0;
    w.data_mut()[3] = 1.0;
    let w = g.constant(w);
    let y = g.conv2d(x, w, None, Conv2dSpec::symmetric(1, 0)).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let mut onehot = Tensor::zeros(&[1, 3, 3]);
    onehot.data_mut()[4] = 1.0;
    let x = g.constant(onehot);
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, Conv2dSpec::symmetric(1, 1)).unwrap();
    assert_eq!(g.value(y), &Tensor::ones(&[1, 3, 3]));

    let w0 = g.constant(Tensor::zeros(&[4, 1, 3, 3]));
    let y = g.conv2d(x, w0, None, Conv2dSpec::symmetric(1, 1)).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros(&[4, 3, 3]));
}

#[test]
fn conv2d_output_extent_and_rejection() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 8, 8]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, Conv2dSpec::same(3, 2)).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4]);
    assert!(matches!(
        g.conv2d(x, w, None, Conv2dSpec::symmetric(2, 1)),
        Err(TensorError::InvalidShape { .. })
    ));
}

#[test]
fn conv2d_matches_direct_definition() {
    // Independent oracle: sum over the padded window written out per output pixel.
    let mut rng = Rng::seed(11);
    let x = rng.uniform_tensor(&[2, 6, 6], -1.0, 1.0);
    let w = rng.uniform_tensor(&[3, 2, 3, 3], -1.0, 1.0);
    for spec in [
        Conv2dSpec::symmetric(1, 1),
        Conv2dSpec::same(3, 2),
        Conv2dSpec::symmetric(1, 0),
    ] {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, spec).unwrap();
        let out = g.value(y);
        let (ho, wo) = (out.shape()[1], out.shape()[2]);
        for k in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad_lo as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.pad_lo as isize;
                                if (0..6).contains(&iy) && (0..6).contains(&ix) {
                                    s += w.data()[((k * 2 + c) * 3 + ky) * 3 + kx]
                                        * x.data()[(c * 6 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data()[(k * ho + oy) * wo + ox] - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let c = g.constant(Tensor::full(&[2], 3.0));
    let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros(&[2]));

    let x = g.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-9);
    assert!((g.value(y).data()[1] + 1.0).abs() < 1e-9);

    let zero_gamma = g.constant(Tensor::zeros(&[2]));
    let shift = g.constant(Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
    let xs = g.constant(t(&[&[4.0, 9.0], &[-1.0, 2.0]]));
    let y = g.layer_norm(xs, zero_gamma, shift, 1e-5).unwrap();
    assert_eq!(g.value(y), &t(&[&[0.5, -2.0], &[0.5, -2.0]]));
}

#[test]
fn bilinear_resize_examples() {
    let mut rng = Rng::seed(5);
    let mut g = Graph::new();
    let x = g.constant(rng.uniform_tensor(&[2, 3, 4], -1.0, 1.0));
    let y = g.resize(x, 3, 4).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let c = g.constant(Tensor::full(&[1, 3, 5], 0.7));
    let y = g.resize(c, 7, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let sq = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = g.resize(sq, 1, 1).unwrap();
    assert!((g.value(y).item() - 1.5).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let mut rng = Rng::seed(9);
    let x0 = rng.uniform_tensor(&[3, 2], -2.0, 2.0);

    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[3, 2]));

    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &x0.map(|v| 2.0 * v));

    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let c = g.constant(x0.clone());
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert!(g.grad(x).is_some());
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.backward(s).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = Rng::seed(42);
        let mut g = Graph::new();
        let x = g.leaf(rng.uniform_tensor(&[4, 3], -1.0, 1.0));
        let w = g.leaf(rng.uniform_tensor(&[3, 5], -1.0, 1.0));
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let y = g.log(y);
        let s = g.sum(y);
        g.backward(s).unwrap();
        (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn softmax_and_sigmoid_ranges() {
    for seed in 0..20 {
        let mut rng = Rng::seed(seed);
        let mut g = Graph::new();
        let x = g.constant(rng.uniform_tensor(&[3, 4, 5], -20.0, 20.0));
        for axis in 0..3 {
            let y = g.softmax(x, axis).unwrap();
            let s = g.sum_axis(y, axis).unwrap();
            assert!(g.value(s).data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        }
        let s = g.sigmoid(x);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn grad_check_sum_is_exact() {
    let mut rng = Rng::seed(1);
    let x = rng.uniform_tensor(&[4], -1.0, 1.0);
    let r = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn narrow_concat_select_roundtrip() {
    let mut rng = Rng::seed(2);
    let mut g = Graph::new();
    let x = g.constant(rng.uniform_tensor(&[3, 6], -1.0, 1.0));
    let a = g.narrow(x, 1, 0, 2).unwrap();
    let b = g.narrow(x, 1, 2, 4).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c), g.value(x));
    let r = g.select_rows(x, &[2, 0]).unwrap();
    assert_eq!(g.value(r).row(0), g.value(x).row(2));
    assert_eq!(g.value(r).row(1), g.value(x).row(0));
}
