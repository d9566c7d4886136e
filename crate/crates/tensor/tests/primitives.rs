use bitadapt_tensor::gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckStatus};
use bitadapt_tensor::{Graph, Result, Tensor, TensorError, Var, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(r ⊙ y)` for a fixed random projection `r`, turning any op output into
/// a scalar with a non-degenerate gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

#[test]
fn relu_values() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_gradient_is_zero_at_the_kink() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn clip_gradient_is_zero_on_both_edges() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_vec(vec![-0.5, 0.0, 0.5, 1.0, 1.5]));
    let y = g.clip(x, 0.0, 1.0);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn batch_norm_centers_a_shifted_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..2 * 3 * 4 * 4)
        .map(|_| 5.0 + rng.gen_range(-1.0..1.0))
        .collect();
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2, 3, 4, 4], data).unwrap());
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let y = g.batch_norm(x, gamma, beta, BN_EPS).unwrap();
    let out = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| (0..16).map(move |k| (n * 3 + c) * 16 + k))
            .map(|i| out[i] as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = random(&mut rng, &[1, 1, 4, 4]);
    let w0 = random(&mut rng, &[1, 1, 3, 3]);
    let wrt_x = grad_check(
        |g, x| {
            let w = g.constant(w0.clone());
            let y = g.conv2d(x, w, 1, 0)?;
            project(g, y, 5)
        },
        &x0,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(wrt_x.passed(), "{wrt_x:?}");
    let wrt_w = grad_check(
        |g, w| {
            let x = g.constant(x0.clone());
            let y = g.conv2d(x, w, 1, 0)?;
            project(g, y, 5)
        },
        &w0,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(wrt_w.passed(), "{wrt_w:?}");
}

#[test]
fn conv2d_with_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x0 = random(&mut rng, &[2, 2, 5, 5]);
    let w0 = random(&mut rng, &[3, 2, 3, 3]);
    let mut g = Graph::<f64>::new();
    let x = g.constant(x0.clone());
    let w = g.constant(w0.clone());
    let y = g.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 3, 3]);
    // brute-force one output element: n=1, o=2, oy=1, ox=2
    let mut expect = 0.0;
    for c in 0..2 {
        for ky in 0..3 {
            for kx in 0..3 {
                let (iy, ix) = (2 + ky as isize - 1, 2 * 2 + kx as isize - 1);
                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                    let xi = ((2 + c) * 5 + iy as usize) * 5 + ix as usize;
                    let wi = ((2 * 2 + c) * 3 + ky) * 3 + kx;
                    expect += x0.data()[xi] * w0.data()[wi];
                }
            }
        }
    }
    let got = g.value(y).data()[((3 + 2) * 3 + 1) * 3 + 2];
    assert!((got - expect).abs() < 1e-12);

    let report = grad_check(
        |g, x| {
            let w = g.constant(w0.clone());
            let y = g.conv2d(x, w, 2, 1)?;
            project(g, y, 9)
        },
        &x0,
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(report.passed());
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::<f32>::new();
    let w = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_of_mean() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5]));
    let loss = g.mean(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::<f32>::new();
    let w = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[4.0, 8.0, 12.0]);
    assert_eq!(g.backward_calls(), 2);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(TensorError::NotScalar { .. })));
}

#[test]
fn unreachable_leaves_get_no_gradient() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::from_vec(vec![1.0]));
    let b = g.param(Tensor::from_vec(vec![1.0]));
    let loss = g.sum(a);
    g.backward(loss).unwrap();
    assert!(g.grad(a).is_some());
    assert!(g.grad(b).is_none());
}

#[test]
fn two_layer_network_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = random(&mut rng, &[4, 3]);
    let w1 = random(&mut rng, &[3, 5]);
    let w2 = random(&mut rng, &[5, 2]);
    let net = |g: &mut Graph<f64>, w1v: Var, w2v: Var| -> Result<Var> {
        let x = g.constant(x0.clone());
        let h = g.matmul(x, w1v)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2v)?;
        g.cross_entropy(o, &[0, 1, 1, 0])
    };
    let r1 = grad_check(
        |g, w| {
            let w2v = g.constant(w2.clone());
            net(g, w, w2v)
        },
        &w1,
        1e-5,
        1e-3,
    )
    .unwrap();
    let r2 = grad_check(
        |g, w| {
            let w1v = g.constant(w1.clone());
            net(g, w1v, w)
        },
        &w2,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(
        r1.passed() && r2.passed(),
        "{} {}",
        r1.max_rel_error,
        r2.max_rel_error
    );
}

#[test]
fn gradcheck_of_square() {
    let report = grad_check(
        |g, x| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        },
        &Tensor::<f64>::from_vec(vec![3.0]),
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!((report.analytic[0] - 6.0).abs() < 1e-12);
    assert!((report.numeric[0] - 6.0).abs() < 1e-6);
    assert!(report.max_rel_error < 1e-6);
}

#[test]
fn gradcheck_of_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&mut rng, &[1, 5]).map(|v| 3.0 * v);
    let report = grad_check(|g, x| g.cross_entropy(x, &[2]), &logits, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{}", report.max_rel_error);
}

#[test]
fn gradcheck_marks_straight_through_ops_as_excluded() {
    let x0 = Tensor::<f64>::from_vec(vec![0.12, 0.38, 0.61, 0.9]);
    let report = grad_check(
        |g, x| {
            let q = g.round_ste(x, 3);
            let sq = g.mul(q, q)?;
            Ok(g.sum(sq))
        },
        &x0,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert_eq!(report.status, GradCheckStatus::ExcludedSte);
    // numeric derivative of a step function is zero, the STE gradient is not
    assert!(report.max_rel_error > 0.5);
}

#[test]
fn fan_out_sums_both_paths() {
    let x0 = Tensor::<f64>::from_vec(vec![0.3, -1.2, 2.0]);
    let grad_of = |paths: &[bool; 2]| {
        let mut g = Graph::<f64>::new();
        let x = g.param(x0.clone());
        let mut terms = Vec::new();
        if paths[0] {
            let t = g.tanh(x);
            terms.push(g.sum(t));
        }
        if paths[1] {
            let sq = g.mul(x, x).unwrap();
            terms.push(g.sum(sq));
        }
        let loss = terms
            .iter()
            .skip(1)
            .fold(terms[0], |acc, &t| g.add(acc, t).unwrap());
        g.backward(loss).unwrap();
        g.grad(x).unwrap().data().to_vec()
    };
    let both = grad_of(&[true, true]);
    let a = grad_of(&[true, false]);
    let b = grad_of(&[false, true]);
    for i in 0..3 {
        assert!((both[i] - (a[i] + b[i])).abs() < 1e-12);
    }
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    match g.add(a, b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let err = g.matmul(a, a).unwrap_err();
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn pooling_and_conv_reject_empty_outputs() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    assert!(matches!(
        g.max_pool2d(x, 2, 2, false),
        Err(TensorError::EmptyOutput { .. })
    ));
    let pooled = g.max_pool2d(x, 2, 2, true).unwrap();
    assert_eq!(g.shape(pooled), &[1, 1, 1, 1]);
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, 1, 0),
        Err(TensorError::EmptyOutput { .. })
    ));
}

#[test]
fn ceil_mode_pooling_keeps_partial_windows() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap());
    let y = g.max_pool2d(x, 2, 2, true).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 6.0, 8.0, 9.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(
        g.grad(x).unwrap().data(),
        &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
    );
}

#[test]
fn div_scalar_guards_zero_over_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(&[3]));
    let m = g.max_all(x);
    let y = g.div_scalar(x, m).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 3]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().all_finite());
}

#[test]
fn sq_dist_and_pick_values() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let d = g.sq_dist(a, b).unwrap();
    assert_eq!(g.value(d).data(), &[5.0, 1.0]);
    let m = g.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let p = g.pick(m, &[2, 0]).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0]);
    assert!(g.pick(m, &[3, 0]).is_err());
}

#[test]
fn kink_crossings_are_skipped_not_failed() {
    // x[0] sits within eps of the relu kink
    let x0 = Tensor::<f64>::from_vec(vec![1e-4, 0.7]);
    let report = grad_check_with(
        |g, x| {
            let y = g.relu(x);
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &x0,
        GradCheckOptions {
            eps: 1e-3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(report.skipped_kinks, 1);
    assert!(report.passed());
}
