use super::*;
use crate::rng::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0))
}

/// Values in ±[0.1, 1.1] spaced so no two lie within 1e-3 of each other,
/// keeping relu and max-pool away from their kinks under a 1e-5 step.
fn kink_free(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| {
            let mag = 0.1 + (i as f64 + 0.5) / n as f64;
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    rng.shuffle(&mut vals);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Weighted sum with fixed weights so that sum-invariant ops (softmax,
/// normalization) are still checked non-trivially.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ib = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(ib).data(), &[5.0, 6.0, 7.0, 8.0]);
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("by [2, 3]"), "{err}");
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_of_sum_is_ones_times_b_transposed() {
    let mut rng = Rng::new(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(a), tape.param(b.clone()));
    let ab = tape.matmul(va, vb).unwrap();
    let s = tape.sum(ab);
    let ga = tape.backward(s).unwrap().wrt(va);
    for r in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|c| b.get(&[k, c])).sum();
            assert!((ga.get(&[r, k]) - expect).abs() < 1e-12);
        }
    }
    let err = grad_check(
        |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            Ok(tp.sum(y))
        },
        &[random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn([3, 3, 1], |i| (i + 1) as f64));
    let k = tape.constant(Tensor::ones([2, 2, 1, 1]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 1]);
    assert_eq!(tape.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);

    // 1×1 identity-channel kernel
    let mut rng = Rng::new(2);
    let input = random(&[4, 5, 3], &mut rng);
    let xi = tape.constant(input.clone());
    let eye = tape.constant(Tensor::eye(3).reshape([1, 1, 3, 3]).unwrap());
    let yi = tape.conv2d(xi, eye, 1, 0).unwrap();
    assert_eq!(tape.value(yi), &input);

    // padded, strided shape arithmetic
    let big = tape.constant(Tensor::zeros([7, 6, 2]));
    let k3 = tape.constant(Tensor::zeros([3, 3, 2, 4]));
    let ys = tape.conv2d(big, k3, 2, 1).unwrap();
    assert_eq!(tape.shape(ys), &[(7 + 2 - 3) / 2 + 1, (6 + 2 - 3) / 2 + 1, 4]);
}

#[test]
fn conv2d_rejects_oversized_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([2, 2, 1]));
    let k = tape.constant(Tensor::zeros([3, 3, 1, 1]));
    assert!(matches!(tape.conv2d(x, k, 1, 0), Err(Error::Dimension(_))));
    assert!(tape.conv2d(x, k, 1, 1).is_ok());
}

#[test]
fn conv2d_kernel_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = Rng::new(100 + seed);
        let x = random(&[5, 5, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let err = grad_check(
            |tp, v| {
                let y = tp.conv2d(v[0], v[1], 1, 1)?;
                weighted(tp, y, seed)
            },
            &[x, k],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn relu_examples_and_mask() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    let s = tape.sum(y);
    assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 1.0]);

    let nonneg = t(&[3], &[0.0, 1.0, 5.0]);
    let z = tape.constant(nonneg.clone());
    let rz = tape.relu(z);
    assert_eq!(tape.value(rz), &nonneg);

    let mut rng = Rng::new(3);
    let err = grad_check(|tp, v| Ok(tp.relu(v[0])), &[kink_free(&[40], &mut rng)], 1e-5).unwrap();
    assert!(err < 1e-4);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[0.0, 0.0]));
    let sa = tape.softmax(a, 0).unwrap();
    assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);
    let b = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
    let sb = tape.softmax(b, 0).unwrap();
    let v = tape.value(sb).data();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-12 && (v[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_is_shift_invariant_and_normalized() {
    let mut rng = Rng::new(4);
    let x = random(&[3, 5], &mut rng);
    let shifted = x.map(|v| v + 123.0);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x), tape.constant(shifted));
    let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
    assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-6);
    for row in tape.value(sa).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    // along the leading axis too
    let s0 = tape.softmax(a, 0).unwrap();
    for c in 0..5 {
        let col: f64 = (0..3).map(|r| tape.value(s0).get(&[r, c])).sum();
        assert!((col - 1.0).abs() < 1e-6);
    }
    // large logits stay finite
    let huge = tape.constant(t(&[2], &[1000.0, 0.0]));
    let sh = tape.softmax(huge, 0).unwrap();
    assert!(tape.value(sh).all_finite());
}

#[test]
fn softmax_gradient_checks_on_both_axes() {
    for axis in 0..2 {
        let mut rng = Rng::new(5 + axis as u64);
        let err = grad_check(
            |tp, v| {
                let y = tp.softmax(v[0], axis)?;
                weighted(tp, y, 9)
            },
            &[random(&[4, 3], &mut rng)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "axis {axis}: {err}");
    }
}

#[test]
fn adaptive_max_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn([4, 4, 1], |i| (i + 1) as f64));
    let y = tape.adaptive_max_pool2d(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0, 8.0, 14.0, 16.0]);
    let g = tape.adaptive_max_pool2d(x, 1).unwrap();
    assert_eq!(tape.value(g).data(), &[16.0]);
    let id = tape.adaptive_max_pool2d(x, 4).unwrap();
    assert_eq!(tape.value(id), tape.value(x));
    assert!(matches!(tape.adaptive_max_pool2d(x, 0), Err(Error::Argument(_))));

    // H=5, n=2: bins [0,3) and [2,5); row 2 belongs to both
    let col = tape.constant(t(&[5, 1, 1], &[0.0, 0.0, 9.0, 0.0, 0.0]));
    let pooled = tape.adaptive_max_pool2d(col, 2).unwrap();
    assert_eq!(tape.shape(pooled), &[2, 2, 1]);
    assert_eq!(tape.value(pooled).data(), &[9.0, 9.0, 9.0, 9.0]);
}

#[test]
fn max_pool_gradient_routes_to_first_maximum() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2, 2, 1], &[3.0, 3.0, 1.0, 3.0]));
    let y = tape.adaptive_max_pool2d(x, 1).unwrap();
    let s = tape.sum(y);
    assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn pooling_gradients_match_finite_differences() {
    let mut rng = Rng::new(6);
    for n in 1..=4 {
        let err = grad_check(
            |tp, v| {
                let y = tp.adaptive_max_pool2d(v[0], n)?;
                weighted(tp, y, n as u64)
            },
            &[kink_free(&[5, 6, 2], &mut rng)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "n={n}: {err}");
    }
    let err = grad_check(
        |tp, v| {
            let y = tp.max_pool2d(v[0], 2, 2)?;
            weighted(tp, y, 1)
        },
        &[kink_free(&[5, 4, 3], &mut rng)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4);
}

#[test]
fn avg_pool_region_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full([4, 4, 3], 5.0));
    let r = tape.avg_pool_region(c, 1..3, 0..4).unwrap();
    assert_eq!(tape.value(r).data(), &[5.0, 5.0, 5.0]);

    let mut rng = Rng::new(7);
    let x = random(&[6, 5, 2], &mut rng);
    let xv = tape.constant(x.clone());
    let full = tape.avg_pool_region(xv, 0..6, 0..5).unwrap();
    let flat = tape.reshape(xv, [30, 2]).unwrap();
    let gap = tape.mean(flat, 0).unwrap();
    assert!(tape.value(full).max_abs_diff(tape.value(gap)) < 1e-12);

    // brute-force summation oracle on a random 3×3 rectangle
    let region = tape.avg_pool_region(xv, 2..5, 1..4).unwrap();
    for ch in 0..2 {
        let mut s = 0.0;
        for y in 2..5 {
            for xx in 1..4 {
                s += x.get(&[y, xx, ch]);
            }
        }
        assert!((tape.value(region).data()[ch] - s / 9.0).abs() < 1e-6);
    }
    assert!(matches!(tape.avg_pool_region(xv, 2..2, 0..1), Err(Error::Argument(_))));
    assert!(matches!(tape.avg_pool_region(xv, 0..7, 0..1), Err(Error::Argument(_))));
    let err = grad_check(
        |tp, v| {
            let y = tp.avg_pool_region(v[0], 1..4, 0..3)?;
            weighted(tp, y, 2)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4);
}

#[test]
fn upsample_examples_and_replication_counts() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.upsample_nearest(x, 4, 4).unwrap();
    let expect = [
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(tape.value(y).data(), &expect);
    let same = tape.upsample_nearest(x, 2, 2).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    assert!(matches!(tape.upsample_nearest(x, 1, 4), Err(Error::Argument(_))));

    // 2×3 → 5×7: each source cell is copied a fixed number of times
    let src = tape.param(Tensor::ones([2, 3, 1]));
    let up = tape.upsample_nearest(src, 5, 7).unwrap();
    let s = tape.sum(up);
    let g = tape.backward(s).unwrap().wrt(src);
    let mut counts = vec![0.0; 6];
    for r in 0..5 {
        for c in 0..7 {
            counts[(r * 2 / 5) * 3 + c * 3 / 7] += 1.0;
        }
    }
    assert_eq!(g.data(), &counts[..]);
    let err = grad_check(|tp, v| tp.upsample_nearest(v[0], 5, 7), &[Tensor::ones([2, 3, 1])], 1e-5)
        .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let n = tape.normalize(x, 0, 1e-12).unwrap();
    let v = tape.value(n).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    let c = tape.constant(Tensor::full([5], 4.0));
    let nc = tape.normalize(c, 0, 1e-5).unwrap();
    assert!(tape.value(nc).data().iter().all(|&v| v == 0.0));

    let mut rng = Rng::new(8);
    let r = tape.constant(random(&[3, 64], &mut rng));
    let gamma = tape.param(Tensor::ones([64]));
    let beta = tape.param(Tensor::zeros([64]));
    let ln = tape.layer_norm(r, gamma, beta, 1, 1e-9).unwrap();
    for row in tape.value(ln).data().chunks(64) {
        let mean = row.iter().sum::<f64>() / 64.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_gradient_checks() {
    for axis in 0..2 {
        let mut rng = Rng::new(9);
        let x = random(&[4, 6], &mut rng);
        let n = [4, 6][axis];
        let gamma = Tensor::from_fn([n], |_| rng.uniform_range(0.5, 1.5));
        let beta = random(&[n], &mut rng);
        let err = grad_check(
            |tp, v| {
                let y = tp.layer_norm(v[0], v[1], v[2], axis, 1e-5)?;
                weighted(tp, y, 3)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "axis {axis}: {err}");
    }
}

#[test]
fn dropout_modes() {
    let mut rng = Rng::new(10);
    let mut tape = Tape::new();
    let x = tape.param(random(&[50], &mut rng));
    assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.3, Mode::Eval, &mut rng).unwrap(), x);
    assert!(matches!(tape.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Argument(_))));
    assert!(tape.dropout(x, -0.1, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_statistics() {
    let mut rng = Rng::new(11);
    let n = 100_000;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones([n]));
    let y = tape.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
    let v = tape.value(y).data();
    let zeros = v.iter().filter(|&&a| a == 0.0).count() as f64 / n as f64;
    let mean = v.iter().sum::<f64>() / n as f64;
    assert!((zeros - 0.3).abs() <= 0.01, "zero fraction {zeros}");
    assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    let kept = v.iter().find(|&&a| a != 0.0).unwrap();
    assert!((kept - 1.0 / 0.7).abs() < 1e-12);
}

#[test]
fn dropout_masks_are_seed_deterministic() {
    let run = |seed| {
        let mut rng = Rng::new(seed);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1000]));
        let y = tape.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn backward_examples() {
    let mut rng = Rng::new(12);
    let x = random(&[7], &mut rng);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap().wrt(v);
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-12);
    }

    // detached input gets a zero gradient
    let c = tape.constant(x.clone());
    let p = tape.mul(v, c).unwrap();
    let s2 = tape.sum(p);
    let grads = tape.backward(s2).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.wrt(c).data().iter().all(|&z| z == 0.0));

    assert!(matches!(tape.backward(p), Err(Error::Argument(_))));
}

#[test]
fn composite_conv_relu_softmax_ce_gradient() {
    for seed in 0..10 {
        let mut rng = Rng::new(200 + seed);
        let x = random(&[6, 6, 2], &mut rng);
        let k = random(&[3, 3, 2, 4], &mut rng);
        let w = random(&[4, 3], &mut rng);
        let target = Tensor::new([1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let report = GradCheck::default()
            .run(
                |tp, v| {
                    let y = tp.conv2d(v[0], v[1], 1, 0)?;
                    let y = tp.relu(y);
                    let flat = tp.reshape(y, [16, 4])?;
                    let pooled = tp.mean(flat, 0)?;
                    let row = tp.reshape(pooled, [1, 4])?;
                    let logits = tp.matmul(row, v[2])?;
                    let p = tp.softmax(logits, 1)?;
                    tp.cross_entropy(p, &target)
                },
                &[x, k, w],
            )
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn cross_entropy_validates_targets() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(t(&[1, 2], &[0.5, 0.5]));
    assert!(tape.cross_entropy(p, &t(&[1, 2], &[1.0, 1.0])).is_err());
    assert!(tape.cross_entropy(p, &t(&[1, 2], &[0.5, 0.0])).is_err());
    assert!(tape.cross_entropy(p, &t(&[2, 1], &[1.0, 0.0])).is_err());
    let l = tape.cross_entropy(p, &t(&[1, 2], &[0.0, 1.0])).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn concat_and_bias_gradients() {
    let mut rng = Rng::new(13);
    let err = grad_check(
        |tp, v| {
            let a = tp.add_bias(v[0], v[2])?;
            let c = tp.concat(&[a, v[1]])?;
            weighted(tp, c, 4)
        },
        &[random(&[2, 3], &mut rng), random(&[4, 3], &mut rng), random(&[3], &mut rng)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10);
}

#[test]
fn sgd_step_examples() {
    let mut w = Tensor::<f64>::scalar(1.0);
    sgd_step(&mut w, &Tensor::scalar(0.5), 0.1).unwrap();
    assert!((w.item() - 0.95).abs() < 1e-15);

    let mut rng = Rng::new(14);
    let p0 = random(&[5], &mut rng);
    let mut p = p0.clone();
    sgd_step(&mut p, &Tensor::zeros([5]), 0.1).unwrap();
    assert_eq!(p, p0);

    let (g1, g2) = (random(&[5], &mut rng), random(&[5], &mut rng));
    let mut two = p0.clone();
    sgd_step(&mut two, &g1, 0.1).unwrap();
    sgd_step(&mut two, &g2, 0.1).unwrap();
    let mut summed_grad = g1.clone();
    summed_grad.add_assign(&g2);
    let mut one = p0.clone();
    sgd_step(&mut one, &summed_grad, 0.1).unwrap();
    assert!(one.max_abs_diff(&two) < 1e-12);

    assert!(matches!(
        sgd_step(&mut one, &Tensor::zeros([4]), 0.1),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn grad_check_is_exact_for_linear_and_sensitive_to_corruption() {
    let mut rng = Rng::new(15);
    let w = random(&[6], &mut rng);
    let lin = |tp: &mut Tape<f64>, v: &[Var]| {
        let c = tp.constant(w.clone());
        let p = tp.mul(v[0], c)?;
        Ok(tp.sum(p))
    };
    let x = random(&[6], &mut rng);
    assert!(grad_check(lin, std::slice::from_ref(&x), 1e-5).unwrap() < 1e-10);

    let corrupted = GradCheck {
        analytic_scale: 1.01,
        ..GradCheck::default()
    }
    .run(lin, &[x])
    .unwrap();
    assert!(corrupted.max_rel_error > 5e-3, "{corrupted:?}");
}

#[test]
fn forward_outputs_stay_finite() {
    let mut rng = Rng::new(16);
    let mut tape = Tape::new();
    let x = tape.param(random(&[6, 6, 3], &mut rng).map(|v| v * 50.0));
    let k = tape.param(random(&[3, 3, 3, 4], &mut rng));
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    let y = tape.relu(y);
    let y = tape.adaptive_max_pool2d(y, 3).unwrap();
    let y = tape.upsample_nearest(y, 7, 7).unwrap();
    let flat = tape.reshape(y, [49, 4]).unwrap();
    let n = tape.normalize(flat, 1, 1e-5).unwrap();
    let s = tape.softmax(n, 1).unwrap();
    for i in 0..tape.len() {
        assert!(tape.value(Var(i)).all_finite(), "node {i}");
    }
    assert!(tape.value(s).all_finite());
}
