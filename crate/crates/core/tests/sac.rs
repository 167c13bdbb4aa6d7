use cure_autodiff::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use cure_core::sac::{
    actor_loss, alpha_loss, critic_forward, critic_loss, init_mlp, sample_action, td_target, SacAgent,
    SacConfig, UpdateInput,
};
use cure_core::srl::EncoderSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BOUNDS: (f64, f64) = (-10.0, 2.0);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_actor(z: usize, h: usize, d: usize, seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    init_mlp(&mut p, "actor", [z, h, h, 2 * d], &mut rng(seed));
    p
}

fn tiny_critic(z: usize, h: usize, d: usize, seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    let mut r = rng(seed);
    init_mlp(&mut p, "q1_", [z + d, h, h, 1], &mut r);
    init_mlp(&mut p, "q2_", [z + d, h, h, 1], &mut r);
    // Nonzero biases so the oracle exercises them.
    for i in 0..p.len() {
        if p.name(i).ends_with(".b") {
            *p.get_mut(i) = Tensor::uniform(p.get(i).shape(), -0.3, 0.3, &mut r);
        }
    }
    p
}

fn manual_mlp(p: &ParamSet<f64>, first: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in 0..3 {
        let w = p.get(first + 2 * layer);
        let b = p.get(first + 2 * layer + 1);
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let mut out = b.data().to_vec();
        for j in 0..dout {
            for i in 0..din {
                out[j] += h[i] * w.data()[i * dout + j];
            }
            if layer < 2 {
                out[j] = out[j].max(0.0);
            }
        }
        h = out;
    }
    h
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[test]
fn unit_gaussian_log_prob_at_zero() {
    let mut actor = tiny_actor(2, 4, 1, 0);
    for i in 0..actor.len() {
        let t = actor.get_mut(i);
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    // log σ = 6·tanh(raw) − 4 = 0.
    let raw = (2.0f64 / 3.0).atanh();
    *actor.get_mut(5) = Tensor::new(&[2], vec![0.0, raw]).unwrap();
    let mut tape = Tape::new();
    let a = actor.bind(&mut tape, false);
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    let eps = Tensor::zeros(&[1, 1]);
    let (act, lp) = sample_action(&mut tape, &a, z, Some(&eps), BOUNDS).unwrap();
    assert_eq!(tape.value(act).item(), 0.0);
    let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((tape.value(lp).item() - expected).abs() < 1e-12);
    assert!((expected + 0.9189).abs() < 1e-4);
}

#[test]
fn log_prob_matches_scalar_formula() {
    let actor = tiny_actor(3, 5, 2, 1);
    let zv = [0.3, -0.7, 0.1];
    let ev = [0.4, -1.2];
    let mut tape = Tape::new();
    let a = actor.bind(&mut tape, false);
    let z = tape.constant(Tensor::new(&[1, 3], zv.to_vec()).unwrap());
    let eps = Tensor::new(&[1, 2], ev.to_vec()).unwrap();
    let (act, lp) = sample_action(&mut tape, &a, z, Some(&eps), BOUNDS).unwrap();
    let out = manual_mlp(&actor, 0, &zv);
    let mut lp_ref = 0.0;
    for j in 0..2 {
        let log_std = -10.0 + 6.0 * (out[2 + j].tanh() + 1.0);
        let u = out[j] + log_std.exp() * ev[j];
        assert!((tape.value(act).data()[j] - u.tanh()).abs() < 1e-12);
        let gauss = -0.5 * ev[j] * ev[j] - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln();
        lp_ref += gauss - (1.0 - u.tanh().powi(2)).ln();
    }
    assert!((tape.value(lp).item() - lp_ref).abs() < 1e-9, "{} vs {lp_ref}", tape.value(lp).item());
}

#[test]
fn vanishing_std_returns_tanh_of_mean() {
    let actor = tiny_actor(2, 4, 2, 2);
    let mut tape = Tape::new();
    let a = actor.bind(&mut tape, false);
    let z = tape.constant(Tensor::new(&[1, 2], vec![0.5, -0.5]).unwrap());
    let eps = Tensor::new(&[1, 2], vec![3.0, -3.0]).unwrap();
    let (act, _) = sample_action(&mut tape, &a, z, Some(&eps), (-40.0, -39.0)).unwrap();
    let out = manual_mlp(&actor, 0, &[0.5, -0.5]);
    for j in 0..2 {
        assert!((tape.value(act).data()[j] - out[j].tanh()).abs() < 1e-12);
    }
}

fn agent_setup(hidden: usize, seed: u64) -> (EncoderSpec, ParamSet<f32>, SacAgent) {
    let spec = EncoderSpec::new(2, 16, 4, 5).unwrap();
    let mut r = rng(seed);
    let enc = spec.init_encoder(&mut r);
    let cfg = SacConfig {
        hidden_dim: hidden,
        ..Default::default()
    };
    let agent = SacAgent::new(cfg, spec.z_dim, 2, true, &mut r).unwrap();
    (spec, enc, agent)
}

#[test]
fn emitted_actions_stay_strictly_inside_bounds() {
    let (spec, enc, mut agent) = agent_setup(16, 3);
    // Push the mean far into saturation.
    let last_b = agent.actor.len() - 1;
    *agent.actor.get_mut(last_b) = Tensor::new(&[4], vec![50.0, -50.0, 2.0, 2.0]).unwrap();
    let mut r = rng(4);
    for _ in 0..50 {
        let obs = Tensor::uniform(&spec.input_shape(1), 0.0, 1.0, &mut r);
        for det in [true, false] {
            let a = agent.act(&spec, &enc, &obs, det, &mut r).unwrap();
            assert!(a.iter().all(|v| v.abs() < 1.0), "{a:?}");
        }
    }
}

#[test]
fn deterministic_actions_repeat() {
    let (spec, enc, agent) = agent_setup(16, 5);
    let obs = Tensor::uniform(&spec.input_shape(1), 0.0, 1.0, &mut rng(6));
    let a = agent.act(&spec, &enc, &obs, true, &mut rng(7)).unwrap();
    let b = agent.act(&spec, &enc, &obs, true, &mut rng(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn target_reduces_to_reward_without_bootstrap() {
    let r = [0.5, 1.0, 0.0];
    let y0 = td_target(&r, &[1.0, 1.0, 1.0], 0.0, &[3.0, 2.0, 1.0], &[4.0, 1.0, 0.0], 0.1, &[-1.0, 2.0, 0.3]);
    assert_eq!(y0, r);
    let yd = td_target(&r, &[0.0, 0.0, 0.0], 0.99, &[3.0, 2.0, 1.0], &[4.0, 1.0, 0.0], 0.1, &[-1.0, 2.0, 0.3]);
    assert_eq!(yd, r);
}

#[test]
fn twin_minimum_bounds_single_critic_targets() {
    let mut r = rng(9);
    for _ in 0..100 {
        let q1: f32 = r.random_range(-5.0..5.0);
        let q2: f32 = r.random_range(-5.0..5.0);
        let lp: f32 = r.random_range(-3.0..3.0);
        let y = td_target(&[0.2], &[1.0], 0.9, &[q1], &[q2], 0.1, &[lp])[0];
        let y1 = td_target(&[0.2], &[1.0], 0.9, &[q1], &[q1], 0.1, &[lp])[0];
        let y2 = td_target(&[0.2], &[1.0], 0.9, &[q2], &[q2], 0.1, &[lp])[0];
        assert!(y <= y1 && y <= y2);
    }
}

#[test]
fn one_transition_target_matches_scalar_oracle() {
    let actor = tiny_actor(2, 3, 1, 10);
    let critic = tiny_critic(2, 3, 1, 11);
    let (zv, ev, r, nd, gamma, alpha) = ([0.2, -0.4], 0.7, 0.3, 1.0, 0.99, 0.1);
    let mut tape = Tape::new();
    let a = actor.bind(&mut tape, false);
    let c = critic.bind(&mut tape, false);
    let z = tape.constant(Tensor::new(&[1, 2], zv.to_vec()).unwrap());
    let eps = Tensor::new(&[1, 1], vec![ev]).unwrap();
    let (act, lp) = sample_action(&mut tape, &a, z, Some(&eps), BOUNDS).unwrap();
    let (q1, q2) = critic_forward(&mut tape, &c, z, act).unwrap();
    let y = td_target(
        &[r as f32],
        &[nd],
        gamma,
        &[tape.value(q1).item() as f32],
        &[tape.value(q2).item() as f32],
        alpha,
        &[tape.value(lp).item() as f32],
    )[0];

    let out = manual_mlp(&actor, 0, &zv);
    let log_std = -10.0 + 6.0 * (out[1].tanh() + 1.0);
    let u = out[0] + log_std.exp() * ev;
    let act_ref = u.tanh();
    let lp_ref = -0.5 * ev * ev - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln()
        - 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u));
    let x = [zv[0], zv[1], act_ref];
    let q1_ref = manual_mlp(&critic, 0, &x)[0];
    let q2_ref = manual_mlp(&critic, 6, &x)[0];
    let y_ref = r + gamma as f64 * (q1_ref.min(q2_ref) - alpha as f64 * lp_ref);
    assert!((y as f64 - y_ref).abs() < 1e-5, "{y} vs {y_ref}");
}

#[test]
fn alpha_gradient_vanishes_at_target_entropy() {
    let mut tape = Tape::<f64>::new();
    let la = tape.variable(Tensor::scalar(0.1f64.ln()));
    let loss = alpha_loss(&mut tape, la, &[2.0, 2.0, 2.0], -2.0).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(la).unwrap().item(), 0.0);
}

#[test]
fn temperature_stays_positive_under_random_updates() {
    let mut log_alpha = ParamSet::<f32>::new();
    log_alpha.add("log_alpha", Tensor::scalar(0.1f32.ln()));
    let mut opt = Adam::new(AdamConfig {
        beta1: 0.5,
        ..AdamConfig::with_lr(1e-4)
    });
    let mut r = rng(12);
    for _ in 0..100_000 {
        let lp: Vec<f32> = (0..4).map(|_| r.random_range(-20.0..20.0)).collect();
        let mut tape = Tape::new();
        let la = log_alpha.bind(&mut tape, true);
        let loss = alpha_loss(&mut tape, la[0], &lp, -2.0).unwrap();
        let mut g = tape.backward(loss).unwrap();
        let grads = ParamSet::collect_grads(&la, &mut g);
        opt.step(&mut [(&mut log_alpha, &grads)]).unwrap();
        let alpha = log_alpha.get(0).item().exp();
        assert!(alpha > 0.0 && alpha.is_finite());
    }
}

fn actor_grads(critic: &ParamSet<f64>) -> Vec<Tensor<f64>> {
    let spec = EncoderSpec::new(1, 15, 2, 3).unwrap();
    let enc = spec.init_encoder::<f64, _>(&mut rng(20));
    let actor = tiny_actor(3, 4, 1, 21);
    let obs = Tensor::<f64>::uniform(&spec.input_shape(3), 0.0, 1.0, &mut rng(22));
    let eps = Tensor::<f64>::randn(&[3, 1], 1.0, &mut rng(23));
    let mut tape = Tape::new();
    let e = enc.bind(&mut tape, true);
    let a = actor.bind(&mut tape, true);
    let c = critic.bind(&mut tape, false);
    let x = tape.constant(obs);
    let (loss, _) = actor_loss(&mut tape, &spec, &e, &a, &c, x, &eps, 0.1, BOUNDS).unwrap();
    let mut g = tape.backward(loss).unwrap();
    for &v in &e {
        assert!(g.get(v).is_none_or(|t| t.sq_norm() == 0.0), "actor gradient reached the encoder");
    }
    ParamSet::collect_grads(&a, &mut g).into_iter().map(Option::unwrap).collect()
}

#[test]
fn actor_gradient_ignores_constant_q_shift() {
    let critic = tiny_critic(3, 4, 1, 30);
    let mut shifted = critic.clone();
    for idx in [5, 11] {
        let t = shifted.get_mut(idx);
        t.data_mut().iter_mut().for_each(|v| *v -= 7.5);
    }
    let g0 = actor_grads(&critic);
    let g1 = actor_grads(&shifted);
    for (a, b) in g0.iter().zip(&g1) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn critic_gradient_reaches_the_encoder() {
    let spec = EncoderSpec::new(1, 15, 2, 3).unwrap();
    let enc = spec.init_encoder::<f64, _>(&mut rng(40));
    let critic = tiny_critic(3, 4, 1, 41);
    let obs = Tensor::<f64>::uniform(&spec.input_shape(2), 0.0, 1.0, &mut rng(42));
    let mut tape = Tape::new();
    let e = enc.bind(&mut tape, true);
    let c = critic.bind(&mut tape, true);
    let x = tape.constant(obs);
    let act = tape.constant(Tensor::new(&[2, 1], vec![0.3, -0.2]).unwrap());
    let y = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
    let loss = critic_loss(&mut tape, &spec, &e, &c, x, act, &y).unwrap();
    let g = tape.backward(loss).unwrap();
    let total: f64 = e.iter().filter_map(|&v| g.get(v)).map(|t| t.sq_norm()).sum();
    assert!(total > 0.0);
}

#[test]
fn polyak_limits_and_contraction() {
    let online = tiny_critic(2, 3, 1, 50);
    let start = tiny_critic(2, 3, 1, 51);
    let mut t = start.clone();
    t.polyak_toward(&online, 0.0).unwrap();
    assert_eq!(t, start);
    t.polyak_toward(&online, 1.0).unwrap();
    assert_eq!(t, online);
    let mut t = start.clone();
    let tau = 0.01;
    let mut d = t.sq_distance(&online).unwrap().sqrt();
    for _ in 0..100 {
        t.polyak_toward(&online, tau).unwrap();
        let nd = t.sq_distance(&online).unwrap().sqrt();
        assert!((nd / d - (1.0 - tau)).abs() < 1e-9);
        d = nd;
    }
    let mut bad = ParamSet::<f64>::new();
    bad.add("x", Tensor::zeros(&[3]));
    assert!(t.polyak_toward(&bad, 0.5).is_err());
}

#[test]
fn full_update_schedule() {
    let (spec, mut enc, mut agent) = agent_setup(16, 60);
    let target_enc = enc.clone();
    let mut r = rng(61);
    let b = 4;
    let obs = Tensor::uniform(&spec.input_shape(b), 0.0, 1.0, &mut r);
    let next = Tensor::uniform(&spec.input_shape(b), 0.0, 1.0, &mut r);
    let actions = Tensor::uniform(&[b, 2], -1.0, 1.0, &mut r);
    let rewards = vec![0.0, 1.0, 0.5, 0.25];
    let not_done = vec![1.0; b];
    let input = UpdateInput {
        obs: &obs,
        next_obs: &next,
        actions: &actions,
        rewards: &rewards,
        not_done: &not_done,
    };
    let actor0 = agent.actor.clone();
    let target0 = agent.critic_target.clone();
    let enc0 = enc.clone();
    let s1 = agent.update(&spec, &mut enc, &target_enc, input, 0.99, 1, &mut r).unwrap();
    assert!(s1.critic_loss.is_some_and(f32::is_finite));
    assert!(s1.actor_loss.is_none());
    assert_eq!(agent.actor, actor0);
    assert_eq!(agent.critic_target, target0);
    assert_ne!(enc, enc0);
    let s2 = agent.update(&spec, &mut enc, &target_enc, input, 0.99, 2, &mut r).unwrap();
    assert!(s2.actor_loss.is_some());
    assert_ne!(agent.actor, actor0);
    assert_ne!(agent.critic_target, target0);
    assert!(agent.alpha() > 0.0);

    let mut frozen = agent.clone();
    frozen.critic_updates_encoder = false;
    let before = enc.clone();
    frozen.update(&spec, &mut enc, &target_enc, input, 0.99, 3, &mut r).unwrap();
    assert_eq!(enc, before);
}

#[test]
fn reward_length_mismatch_is_rejected() {
    let (spec, mut enc, mut agent) = agent_setup(8, 70);
    let target_enc = enc.clone();
    let mut r = rng(71);
    let obs = Tensor::uniform(&spec.input_shape(2), 0.0, 1.0, &mut r);
    let actions = Tensor::zeros(&[2, 2]);
    let input = UpdateInput {
        obs: &obs,
        next_obs: &obs,
        actions: &actions,
        rewards: &[1.0],
        not_done: &[1.0, 1.0],
    };
    assert!(agent.update(&spec, &mut enc, &target_enc, input, 0.99, 1, &mut r).is_err());
}
