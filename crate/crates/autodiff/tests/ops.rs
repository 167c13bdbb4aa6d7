use cure_autodiff::{
    grad_check, Adam, AdamConfig, AutodiffError, GradCheckOptions, ParamSet, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> cure_autodiff::Result<Var>, inputs: &[Tensor<f64>]) -> f64 {
    grad_check(f, inputs, GradCheckOptions::default())
        .unwrap()
        .max_rel_error()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::<f32>::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let va = tape.variable(a.clone());
    let vb = tape.constant(b.clone());
    let p = tape.matmul(va, vb).unwrap();
    let s = tape.sum_all(p);
    let g = tape.backward(s).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((ga.data()[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    let err = check(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum_all(p))
        },
        &[a, b],
    );
    assert!(err < TOL, "matmul rel err {err}");
}

#[test]
fn conv2d_all_ones_gives_nine() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, k, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[9.0]);
}

#[test]
fn conv2d_impulse_response_recovers_flipped_kernel() {
    let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
    let mut img = vec![0.0; 25];
    img[2 * 5 + 2] = 1.0;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 5, 5], &img));
    let k = tape.constant(t64(&[1, 1, 3, 3], &kernel));
    let y = tape.conv2d(x, k, 1).unwrap();
    let out = tape.value(y).data();
    // Cross-correlation: output (oy, ox) reads input (oy+ky, ox+kx), so the
    // impulse at (2, 2) shows kernel entry (2-oy, 2-ox).
    for oy in 0..3 {
        for ox in 0..3 {
            assert_eq!(out[oy * 3 + ox], kernel[(2 - oy) * 3 + (2 - ox)]);
        }
    }
}

#[test]
fn conv2d_rejects_input_smaller_than_kernel() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 2, 5]));
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    assert!(tape.conv2d(x, k, 1).is_err());
    let x = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
    assert!(tape.conv2d(x, k, 3).is_err());
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut r = rng(2);
    for stride in [1, 2] {
        let x = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[1, 3, (6 - 3) / stride + 1, (6 - 3) / stride + 1], 1.0, &mut r);
        let err = check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], stride)?;
                let wv = t.constant(w.clone());
                let p = t.mul(y, wv)?;
                Ok(t.sum_all(p))
            },
            &[x, k],
        );
        assert!(err < TOL, "conv2d stride {stride}: rel err {err}");
    }
}

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b).unwrap()
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut r = rng(3);
    for (stride, size, pad) in [(1, 7, 0), (2, 7, 0), (2, 8, 1)] {
        let k = Tensor::<f64>::randn(&[4, 2, 3, 3], 1.0, &mut r);
        let a = Tensor::<f64>::randn(&[2, 2, size, size], 1.0, &mut r);
        let out = (size - 3) / stride + 1;
        let b = Tensor::<f64>::randn(&[2, 4, out, out], 1.0, &mut r);

        let mut tape = Tape::new();
        let (va, vk, vb) = (
            tape.constant(a.clone()),
            tape.constant(k.clone()),
            tape.constant(b.clone()),
        );
        let conv = tape.conv2d(va, vk, stride).unwrap();
        let convt = tape.conv_transpose2d(vb, vk, stride, pad).unwrap();
        assert_eq!(tape.shape(convt), a.shape());
        let lhs = inner(tape.value(conv), &b);
        let rhs = inner(&a, tape.value(convt));
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");

        // forward of the transpose equals the input gradient of the conv
        let mut tape = Tape::new();
        let va = tape.variable(a.clone());
        let vk = tape.constant(k.clone());
        let vb = tape.constant(b.clone());
        let conv = tape.conv2d(va, vk, stride).unwrap();
        let p = tape.mul(conv, vb).unwrap();
        let s = tape.sum_all(p);
        let ct = tape.conv_transpose2d(vb, vk, stride, pad).unwrap();
        let g = tape.backward(s).unwrap();
        let ga = g.get(va).unwrap();
        for (x, y) in ga.data().iter().zip(tape.value(ct).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_transpose_single_pixel_scales_kernel() {
    let kernel: Vec<f64> = (0..18).map(|i| i as f64 * 0.5).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 1, 1], &[3.0]));
    let k = tape.constant(t64(&[1, 2, 3, 3], &kernel));
    let y = tape.conv_transpose2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 3, 3]);
    for (o, k) in tape.value(y).data().iter().zip(&kernel) {
        assert_eq!(*o, 3.0 * k);
    }
}

#[test]
fn conv_transpose_rejects_bad_requests() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::ones(&[3, 1, 3, 3]));
    assert!(tape.conv_transpose2d(x, k, 1, 0).is_err());
    let k = tape.constant(Tensor::ones(&[2, 1, 3, 3]));
    assert!(tape.conv_transpose2d(x, k, 1, 1).is_err());
    assert!(tape.conv_transpose2d(x, k, 2, 2).is_err());
    assert!(tape.conv_transpose2d(x, k, 2, 1).is_ok());
}

#[test]
fn conv_transpose_gradient_matches_finite_differences() {
    let mut r = rng(4);
    for (stride, pad) in [(1, 0), (2, 0), (2, 1)] {
        let x = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let size = 2 * stride + 3 + pad;
        let w = Tensor::<f64>::randn(&[2, 2, size, size], 1.0, &mut r);
        let err = check(
            |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], stride, pad)?;
                let wv = t.constant(w.clone());
                let p = t.mul(y, wv)?;
                Ok(t.sum_all(p))
            },
            &[x, k],
        );
        assert!(err < TOL, "conv_transpose stride {stride}: rel err {err}");
    }
}

#[test]
fn dense_examples_and_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[3, 2]));
    let w = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap());
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

    let xv = Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.5, 4.0]).unwrap();
    let x = tape.constant(xv.clone());
    let eye = tape.constant(Tensor::eye(2));
    let zero = tape.constant(Tensor::zeros(&[2]));
    let y = tape.dense(x, eye, zero).unwrap();
    assert_eq!(tape.value(y), &xv);

    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.dense(x, eye, bad).is_err());

    let mut r = rng(5);
    let err = check(
        |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            let y = t.tanh(y);
            Ok(t.sum_all(y))
        },
        &[
            Tensor::randn(&[4, 3], 1.0, &mut r),
            Tensor::randn(&[3, 5], 1.0, &mut r),
            Tensor::randn(&[5], 1.0, &mut r),
        ],
    );
    assert!(err < TOL, "dense rel err {err}");
}

#[test]
fn elementwise_values_and_domain() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t64(&[2], &[-1.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

    let z = tape.variable(t64(&[1], &[0.0]));
    let th = tape.tanh(z);
    assert_eq!(tape.value(th).data(), &[0.0]);
    let g = tape.backward(th).unwrap();
    assert_eq!(g.get(z).unwrap().data(), &[1.0]);

    let bad = tape.constant(t64(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(bad), Err(AutodiffError::Domain { .. })));
    let bad = tape.constant(t64(&[1], &[-3.0]));
    assert!(tape.log(bad).is_err());
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut r = rng(6);
    let x = Tensor::<f64>::randn(&[3, 4], 2.0, &mut r);
    let pos = x.map(|v| v.abs() + 0.5);
    for (name, input) in [
        ("softplus", x.clone()),
        ("tanh", x.clone()),
        ("exp", x.clone()),
        ("square", x.clone()),
        ("log", pos),
    ] {
        let err = check(
            |t, v| {
                let y = match name {
                    "softplus" => t.softplus(v[0]),
                    "tanh" => t.tanh(v[0]),
                    "exp" => t.exp(v[0]),
                    "square" => t.square(v[0]),
                    _ => t.log(v[0])?,
                };
                let y = t.square(y);
                Ok(t.sum_all(y))
            },
            &[input],
        );
        assert!(err < TOL, "{name}: rel err {err}");
    }
}

#[test]
fn reductions() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t64(&[3], &[1.0, 2.0, 3.0]));
    let m = tape.mean_all(x);
    assert_eq!(tape.value(m).data(), &[2.0]);
    let s = tape.sum_all(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(matches!(
        tape.sum(x, Some(1)),
        Err(AutodiffError::AxisOutOfRange { axis: 1, rank: 1, .. })
    ));

    let mut r = rng(7);
    for axis in [None, Some(0), Some(1), Some(2)] {
        let err = check(
            |t, v| {
                let s = t.sum(v[0], axis)?;
                let s = t.square(s);
                let m = t.mean(v[0], axis)?;
                let m = t.exp(m);
                let a = t.sum_all(s);
                let b = t.sum_all(m);
                t.add(a, b)
            },
            &[Tensor::randn(&[2, 3, 4], 1.0, &mut r)],
        );
        assert!(err < TOL, "axis {axis:?}: rel err {err}");
    }
}

#[test]
fn cross_entropy_values_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let k = 5;
    let logits = tape.variable(Tensor::full(&[3, k], 0.7));
    let ce = tape.cross_entropy(logits, &[0, 2, 4]).unwrap();
    for &v in tape.value(ce).data() {
        assert!((v - (k as f64).ln()).abs() < 1e-12);
    }

    let sharp = tape.constant(t64(&[1, 3], &[50.0, 0.0, 0.0]));
    let ce = tape.cross_entropy(sharp, &[0]).unwrap();
    assert!(tape.value(ce).item() < 1e-20);

    let inf = tape.constant(t64(&[1, 2], &[f64::INFINITY, 0.0]));
    assert!(matches!(
        tape.cross_entropy(inf, &[0]),
        Err(AutodiffError::NonFinite { .. })
    ));
    assert!(tape.cross_entropy(logits, &[0, 1]).is_err());
    assert!(tape.cross_entropy(logits, &[0, 1, 5]).is_err());

    // gradient of the summed loss is softmax - onehot
    let mut r = rng(8);
    let l = Tensor::<f64>::randn(&[2, 4], 3.0, &mut r);
    let mut tape = Tape::new();
    let v = tape.variable(l.clone());
    let ce = tape.cross_entropy(v, &[1, 3]).unwrap();
    let s = tape.sum_all(ce);
    let g = tape.backward(s).unwrap();
    let targets = [1, 3];
    for row in 0..2 {
        let r = &l.data()[row * 4..row * 4 + 4];
        let z: f64 = r.iter().map(|x| x.exp()).sum();
        for j in 0..4 {
            let expect = r[j].exp() / z - if j == targets[row] { 1.0 } else { 0.0 };
            assert!((g.get(v).unwrap().data()[row * 4 + j] - expect).abs() < 1e-12);
        }
    }
    let err = check(
        |t, v| {
            let ce = t.cross_entropy(v[0], &[1, 3])?;
            let sq = t.square(ce);
            Ok(t.sum_all(sq))
        },
        &[l],
    );
    assert!(err < TOL, "cross entropy rel err {err}");
}

#[test]
fn structural_ops_gradients() {
    let mut r = rng(9);
    let a = Tensor::<f64>::randn(&[3, 2], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let gain = Tensor::<f64>::randn(&[6], 1.0, &mut r);
    let bias = Tensor::<f64>::randn(&[6], 1.0, &mut r);
    let s = Tensor::<f64>::randn(&[1], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 6], 1.0, &mut r);
    let err = check(
        |t, v| {
            let c = t.concat_cols(v[0], v[1])?;
            let n = t.layer_norm(c, v[2], v[3])?;
            let wv = t.constant(w.clone());
            let n = t.mul(n, wv)?;
            let left = t.narrow_cols(n, 1, 3)?;
            let right = t.narrow_cols(n, 3, 3)?;
            let m = t.minimum(left, right)?;
            let m = t.scale_by(m, v[4])?;
            let tr = t.transpose(m)?;
            let rs = t.reshape(tr, &[9])?;
            let sq = t.square(rs);
            let x = t.affine(sq, 0.5, 2.0);
            let y = t.sub(x, rs)?;
            Ok(t.sum_all(y))
        },
        &[a, b, gain, bias, s],
    );
    assert!(err < TOL, "structural ops rel err {err}");
}

#[test]
fn shared_subexpression_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t64(&[1], &[3.0]));
    let y = tape.add(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0]);

    let sq = tape.mul(x, x).unwrap();
    let z = tape.add(sq, x).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[7.0]);
}

#[test]
fn detached_and_constant_inputs_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t64(&[2], &[1.0, 2.0]));
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    assert!(g.get(d).is_none());
}

#[test]
fn grad_check_on_sum_of_squares() {
    let mut r = rng(10);
    let x = Tensor::<f64>::randn(&[10], 1.0, &mut r);
    let report = grad_check(
        |t, v| {
            let s = t.square(v[0]);
            Ok(t.sum_all(s))
        },
        &[x],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
    assert_eq!(report.coords_checked, 10);
}

fn scalar_set(v: f32) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    p.add("w", Tensor::scalar(v));
    p
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut params = scalar_set(0.0);
    let mut adam = Adam::new(AdamConfig::with_lr(1e-3));
    let grads = vec![Some(Tensor::scalar(1.0f32))];
    adam.step(&mut [(&mut params, &grads)]).unwrap();
    // t=1: m̂ = g, v̂ = g², step = lr·g/(|g|+ε)
    let expect = -1e-3 * 1.0 / (1.0 + 1e-8);
    assert!((params.get(0).item() as f64 - expect).abs() < 1e-9);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_zero_gradient_leaves_fresh_params_unchanged() {
    let mut params = scalar_set(0.25);
    let mut adam = Adam::new(AdamConfig::default());
    let grads = vec![Some(Tensor::scalar(0.0f32))];
    adam.step(&mut [(&mut params, &grads)]).unwrap();
    assert_eq!(params.get(0).item(), 0.25);
    assert_eq!(adam.moments().0[0].item(), 0.0);

    // moments decay under zero gradient
    let g1 = vec![Some(Tensor::scalar(1.0f32))];
    adam.step(&mut [(&mut params, &g1)]).unwrap();
    let m1 = adam.moments().0[0].item();
    adam.step(&mut [(&mut params, &grads)]).unwrap();
    assert!((adam.moments().0[0].item() - 0.9 * m1).abs() < 1e-9);
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let mut params = scalar_set(1.0);
    let mut adam = Adam::new(AdamConfig::default());
    let grads = vec![Some(Tensor::scalar(f32::NAN))];
    let err = adam.step(&mut [(&mut params, &grads)]).unwrap_err();
    assert!(err.to_string().contains('w'), "{err}");
    assert_eq!(params.get(0).item(), 1.0);
    assert_eq!(adam.steps(), 0);
}

proptest! {
    #[test]
    fn adam_is_deterministic(seed in 0u64..1000, steps in 1usize..6) {
        let run = || {
            let mut r = rng(seed);
            let mut p = ParamSet::new();
            p.add("a", Tensor::<f32>::randn(&[3, 2], 1.0, &mut r));
            let mut adam = Adam::new(AdamConfig::default());
            for _ in 0..steps {
                let g = vec![Some(Tensor::<f32>::randn(&[3, 2], 1.0, &mut r))];
                adam.step(&mut [(&mut p, &g)]).unwrap();
            }
            p.get(0).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn matmul_adjoint_identity(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        // ⟨A·B, C⟩ = ⟨A, C·Bᵀ⟩
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut r);
        let c = Tensor::<f64>::randn(&[m, n], 1.0, &mut r);
        let mut tape = Tape::new();
        let (va, vb, vc) = (tape.variable(a.clone()), tape.constant(b), tape.constant(c.clone()));
        let p = tape.matmul(va, vb).unwrap();
        let lhs = tape.value(p).dot(&c).unwrap();
        let q = tape.mul(p, vc).unwrap();
        let s = tape.sum_all(q);
        let g = tape.backward(s).unwrap();
        let rhs = a.dot(g.get(va).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut r = rng(seed);
            let mut tape = Tape::<f32>::new();
            let x = tape.variable(Tensor::randn(&[2, 2, 7, 7], 1.0, &mut r));
            let k = tape.variable(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r));
            let y = tape.conv2d(x, k, 2).unwrap();
            let y = tape.square(y);
            let s = tape.sum_all(y);
            let g = tape.backward(s).unwrap();
            let mut bits: Vec<u32> = tape.value(s).data().iter().map(|v| v.to_bits()).collect();
            bits.extend(g.get(k).unwrap().data().iter().map(|v| v.to_bits()));
            bits.extend(g.get(x).unwrap().data().iter().map(|v| v.to_bits()));
            bits
        };
        prop_assert_eq!(run(), run());
    }
}
