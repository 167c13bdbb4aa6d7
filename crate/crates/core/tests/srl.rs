use cure_autodiff::{grad_check, AutodiffError, GradCheckOptions, ParamSet, Tape, Tensor};
use cure_core::srl::{
    bilinear_logits, encode_batch, infonce_loss, rae_loss, EncoderSpec, Srl, SrlConfig, SrlHead, SrlInput,
};
use cure_core::envs::{make_task, SpecOverrides};
use cure_core::replay::center_crop_tensor;
use cure_core::rng::{stream, Stream};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec() -> EncoderSpec {
    EncoderSpec::new(2, 16, 8, 6).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn images(spec: &EncoderSpec, b: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&spec.input_shape(b), 0.0, 1.0, &mut rng(seed))
}

#[test]
fn default_geometry_matches_crop_32() {
    let spec = EncoderSpec::new(3, 32, 32, 50).unwrap();
    assert_eq!(spec.conv_sizes().unwrap(), [15, 13, 11, 9]);
    assert_eq!(spec.feature_len(), 32 * 81);
    assert!(EncoderSpec::new(3, 12, 32, 50).is_err());
}

#[test]
fn zero_observation_gives_bounded_finite_latent() {
    let spec = small_spec();
    let enc = spec.init_encoder::<f32, _>(&mut rng(0));
    let z = encode_batch(&spec, &enc, &Tensor::zeros(&spec.input_shape(1))).unwrap();
    assert_eq!(z.shape(), &[1, 6]);
    assert!(z.data().iter().all(|v| v.is_finite() && v.abs() < 1.0));
}

#[test]
fn identical_observations_give_identical_latents() {
    let spec = small_spec();
    let enc = spec.init_encoder::<f32, _>(&mut rng(1));
    let one = images(&spec, 1, 2);
    let two = Tensor::stack(&[one.index_axis0(0), one.index_axis0(0)]).unwrap();
    let z = encode_batch(&spec, &enc, &two).unwrap();
    assert_eq!(z.data()[..6], z.data()[6..]);
}

#[test]
fn latents_vary_across_a_random_batch() {
    let spec = small_spec();
    let enc = spec.init_encoder::<f32, _>(&mut rng(3));
    let z = encode_batch(&spec, &enc, &images(&spec, 16, 4)).unwrap();
    let d = 6;
    let mut total = 0.0f64;
    for j in 0..d {
        let col: Vec<f64> = (0..16).map(|i| z.data()[i * d + j] as f64).collect();
        let m = col.iter().sum::<f64>() / 16.0;
        total += col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0;
    }
    assert!(total > 0.0);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let spec = small_spec();
    let enc = spec.init_encoder::<f32, _>(&mut rng(0));
    let bad = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(encode_batch(&spec, &enc, &bad).is_err());
}

fn zeroed(p: &ParamSet<f32>) -> ParamSet<f32> {
    let mut q = p.clone();
    for t in q.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    q
}

#[test]
fn perfect_reconstruction_has_zero_loss() {
    let spec = small_spec();
    let enc = zeroed(&spec.init_encoder(&mut rng(0)));
    let dec = zeroed(&spec.init_decoder(&mut rng(0)));
    let mut tape = Tape::<f32>::new();
    let e = enc.bind(&mut tape, false);
    let d = dec.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&spec.input_shape(2)));
    let (loss, per) = rae_loss(&mut tape, &spec, &e, &d, x, 1e-6, 1e-7).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
    assert!(tape.value(per).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_decoder_on_unit_image_has_unit_error() {
    let spec = small_spec();
    let enc = spec.init_encoder(&mut rng(0));
    let dec = zeroed(&spec.init_decoder(&mut rng(0)));
    let mut tape = Tape::<f32>::new();
    let e = enc.bind(&mut tape, false);
    let d = dec.bind(&mut tape, false);
    let x = tape.constant(Tensor::ones(&spec.input_shape(1)));
    let (_, per) = rae_loss(&mut tape, &spec, &e, &d, x, 0.0, 0.0).unwrap();
    assert_eq!(tape.value(per).data(), &[1.0]);
}

#[test]
fn rae_gradient_matches_finite_differences() {
    let spec = EncoderSpec::new(1, 15, 2, 3).unwrap();
    let enc = spec.init_encoder::<f64, _>(&mut rng(10));
    let dec = spec.init_decoder::<f64, _>(&mut rng(11));
    let obs = Tensor::<f64>::uniform(&spec.input_shape(2), 0.0, 1.0, &mut rng(12));
    let ne = enc.len();
    let mut inputs: Vec<Tensor<f64>> = enc.tensors().to_vec();
    inputs.extend(dec.tensors().iter().cloned());
    // Zero biases put dead channels exactly on a ReLU kink; move off it.
    let mut r = rng(13);
    for (name, t) in enc.iter().chain(dec.iter()).zip(inputs.iter_mut()).map(|((n, _), t)| (n, t)) {
        if name.ends_with(".b") && !name.starts_with("ln") {
            *t = Tensor::uniform(t.shape(), -0.2, 0.2, &mut r);
        }
    }
    let report = grad_check(
        |tape, vars| {
            let x = tape.constant(obs.clone());
            let (loss, _) = rae_loss(tape, &spec, &vars[..ne], &vars[ne..], x, 0.1, 0.01)
                .map_err(|e| AutodiffError::InvalidArgument {
                    op: "rae",
                    msg: e.to_string(),
                })?;
            Ok(loss)
        },
        &inputs,
        GradCheckOptions {
            h: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.per_input);
}

fn bind_const(tape: &mut Tape<f64>, rows: &[&[f64]]) -> cure_autodiff::Var {
    let n = rows[0].len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    tape.constant(Tensor::new(&[rows.len(), n], data).unwrap())
}

#[test]
fn two_sample_logits_case() {
    let mut tape = Tape::<f64>::new();
    let q = bind_const(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let k = bind_const(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let w = bind_const(&mut tape, &[&[10.0, 0.0], &[0.0, 10.0]]);
    let logits = bilinear_logits(&mut tape, q, w, k).unwrap();
    assert_eq!(tape.value(logits).data(), &[10.0, 0.0, 0.0, 10.0]);
    let per = tape.cross_entropy(logits, &[0, 1]).unwrap();
    // -ln(e^10 / (e^10 + 1)) evaluated independently.
    let oracle = 4.539889921686465e-5;
    for &v in tape.value(per).data() {
        assert!((v - oracle).abs() < 1e-12, "{v}");
    }
}

fn contrastive_parts(b: usize) -> (EncoderSpec, ParamSet<f64>, ParamSet<f64>, Tensor<f64>, Tensor<f64>) {
    let spec = small_spec();
    let enc = spec.init_encoder::<f64, _>(&mut rng(20));
    let key = spec.init_encoder::<f64, _>(&mut rng(21));
    let a = Tensor::<f64>::uniform(&spec.input_shape(b), 0.0, 1.0, &mut rng(22));
    let p = Tensor::<f64>::uniform(&spec.input_shape(b), 0.0, 1.0, &mut rng(23));
    (spec, enc, key, a, p)
}

fn infonce_values(w: Tensor<f64>, b: usize, perm: Option<&[usize]>) -> Vec<f64> {
    let (spec, enc, key, mut a, mut p) = contrastive_parts(b);
    if let Some(perm) = perm {
        a = Tensor::stack(&perm.iter().map(|&i| a.index_axis0(i)).collect::<Vec<_>>()).unwrap();
        p = Tensor::stack(&perm.iter().map(|&i| p.index_axis0(i)).collect::<Vec<_>>()).unwrap();
    }
    let mut tape = Tape::new();
    let e = enc.bind(&mut tape, true);
    let k = key.bind(&mut tape, false);
    let wv = tape.variable(w);
    let av = tape.constant(a);
    let pv = tape.constant(p);
    let (_, per) = infonce_loss(&mut tape, &spec, &e, &k, wv, av, pv).unwrap();
    tape.value(per).data().to_vec()
}

#[test]
fn zero_bilinear_matrix_gives_log_batch_size() {
    for b in [2, 5, 8] {
        for v in infonce_values(Tensor::zeros(&[6, 6]), b, None) {
            assert!((v - (b as f64).ln()).abs() < 1e-6);
        }
    }
}

#[test]
fn infonce_is_permutation_equivariant() {
    let w = Tensor::<f64>::uniform(&[6, 6], -3.0, 3.0, &mut rng(5));
    let base = infonce_values(w.clone(), 5, None);
    let perm = [3, 0, 4, 1, 2];
    let permuted = infonce_values(w, 5, Some(&perm));
    for (k, &i) in perm.iter().enumerate() {
        assert!((permuted[k] - base[i]).abs() < 1e-12);
        assert!(base[i] >= 0.0);
    }
}

#[test]
fn infonce_rejects_single_sample() {
    let (spec, enc, key, a, p) = contrastive_parts(1);
    let mut tape = Tape::new();
    let e = enc.bind(&mut tape, true);
    let k = key.bind(&mut tape, false);
    let w = tape.variable(Tensor::zeros(&[6, 6]));
    let (av, pv) = (tape.constant(a), tape.constant(p));
    assert!(infonce_loss(&mut tape, &spec, &e, &k, w, av, pv).is_err());
}

#[test]
fn infonce_gradients_skip_the_key_encoder() {
    let (spec, enc, key, a, p) = contrastive_parts(4);
    let mut tape = Tape::new();
    let e = enc.bind(&mut tape, true);
    let k = key.bind(&mut tape, true);
    let w = tape.variable(Tensor::<f64>::uniform(&[6, 6], -1.0, 1.0, &mut rng(1)));
    let (av, pv) = (tape.constant(a), tape.constant(p));
    let (loss, _) = infonce_loss(&mut tape, &spec, &e, &k, w, av, pv).unwrap();
    let mut g = tape.backward(loss).unwrap();
    assert!(g.get(w).is_some());
    assert!(g.take(e[0]).is_some_and(|t| t.sq_norm() > 0.0));
    assert!(k.iter().all(|&v| g.get(v).is_none_or(|t| t.sq_norm() == 0.0)));
}

fn make_srl(head: SrlHead, seed: u64) -> (Srl, ParamSet<f32>) {
    let spec = small_spec();
    let mut r = rng(seed);
    let enc = spec.init_encoder(&mut r);
    let config = SrlConfig {
        head,
        ..Default::default()
    };
    (Srl::new(spec, config, &enc, &mut r).unwrap(), enc)
}

#[test]
fn srl_error_is_pure_and_matches_update() {
    let (mut srl, mut enc) = make_srl(SrlHead::Rae, 0);
    let obs = images(&srl.spec, 4, 9);
    let input = SrlInput::Rae { obs: &obs };
    let a = srl.errors(&enc, input).unwrap();
    let b = srl.errors(&enc, input).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|&e| e >= 0.0));
    let up = srl.update(&mut enc, input).unwrap();
    assert!(up.applied);
    assert_eq!(up.errors, a);
    assert_ne!(srl.errors(&enc, input).unwrap(), a);
}

#[test]
fn contrastive_update_moves_the_key_encoder() {
    let (mut srl, mut enc) = make_srl(SrlHead::Contrastive, 1);
    let a = images(&srl.spec, 4, 1);
    let p = images(&srl.spec, 4, 2);
    let input = SrlInput::Contrastive {
        anchor: &a,
        positive: &p,
    };
    let before = srl.key_encoder.clone().unwrap();
    let errs = srl.errors(&enc, input).unwrap();
    assert!(errs.iter().all(|&e| e >= 0.0));
    let up = srl.update(&mut enc, input).unwrap();
    assert_eq!(up.errors, errs);
    let after = srl.key_encoder.as_ref().unwrap();
    assert!(after.sq_distance(&before).unwrap() > 0.0);
    assert!(srl.errors(&enc, SrlInput::Rae { obs: &a }).is_err());
}

#[test]
fn key_encoder_contracts_toward_a_frozen_encoder() {
    let (mut srl, _) = make_srl(SrlHead::Contrastive, 2);
    let other = srl.spec.init_encoder::<f32, _>(&mut rng(77));
    let mut last = srl.key_encoder.as_ref().unwrap().sq_distance(&other).unwrap();
    for _ in 0..50 {
        srl.update_key(&other).unwrap();
        let d = srl.key_encoder.as_ref().unwrap().sq_distance(&other).unwrap();
        assert!(d < last);
        last = d;
    }
}

#[test]
fn repeated_update_on_one_batch_usually_descends() {
    let trials = 20;
    let mut ok = 0;
    for t in 0..trials {
        let (mut srl, mut enc) = make_srl(SrlHead::Rae, 100 + t);
        let obs = images(&srl.spec, 8, 200 + t);
        let input = SrlInput::Rae { obs: &obs };
        let first = srl.update(&mut enc, input).unwrap().loss;
        let second = srl.update(&mut enc, input).unwrap().loss;
        ok += (second <= first) as usize;
    }
    assert!(ok as f64 >= 0.9 * trials as f64, "{ok}/{trials}");
}

#[test]
fn latent_penalty_grows_with_lambda_z() {
    let spec = small_spec();
    let enc = spec.init_encoder::<f32, _>(&mut rng(4));
    let dec = spec.init_decoder::<f32, _>(&mut rng(5));
    let obs = images(&spec, 4, 6);
    let per = |lz: f32| {
        let mut tape = Tape::new();
        let e = enc.bind(&mut tape, false);
        let d = dec.bind(&mut tape, false);
        let x = tape.constant(obs.clone());
        let (_, per) = rae_loss(&mut tape, &spec, &e, &d, x, lz, 0.0).unwrap();
        tape.value(per).data().to_vec()
    };
    let base = per(0.0);
    let mut last = vec![0.0f32; 4];
    for lz in [1e-3, 1e-2, 1e-1, 1.0] {
        let cur: Vec<f32> = per(lz).iter().zip(&base).map(|(a, b)| a - b).collect();
        for (c, l) in cur.iter().zip(&last) {
            assert!(c >= l);
        }
        last = cur;
    }
}

#[test]
fn overfitting_a_fixed_set_reduces_loss_and_separates_novel_inputs() {
    let (mut srl, mut enc) = make_srl(SrlHead::Rae, 7);
    let spec = srl.spec;
    let over = SpecOverrides {
        render_size: Some(20),
        frames: Some(2),
        ..Default::default()
    };
    let mut env = make_task("reacher_easy", &over, stream(8, Stream::Env)).unwrap();
    let mut data = Vec::new();
    for _ in 0..8 {
        let o = env.reset().unwrap();
        data.extend(center_crop_tensor(&o, 16).unwrap().into_data());
    }
    let obs = Tensor::new(&spec.input_shape(8), data).unwrap();
    let input = SrlInput::Rae { obs: &obs };
    let mut losses = Vec::new();
    for _ in 0..2000 {
        losses.push(srl.update(&mut enc, input).unwrap().loss);
    }
    let windows: Vec<f32> = losses.chunks(100).map(|c| c.iter().sum::<f32>() / 100.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "{windows:?}");
    }
    let inverted = obs.map(|v| 1.0 - v);
    let seen: f32 = srl.errors(&enc, input).unwrap().iter().sum();
    let novel: f32 = srl.errors(&enc, SrlInput::Rae { obs: &inverted }).unwrap().iter().sum();
    assert!(seen < novel, "{seen} vs {novel}");
}
