use cure_core::envs::{make_task, SpecOverrides, TaskName, REACHER_ARENA_HALF};
use cure_core::rng::{stream, Stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn env(name: &str, seed: u64) -> cure_core::envs::Env {
    make_task(name, &SpecOverrides::default(), stream(seed, Stream::Env)).unwrap()
}

#[test]
fn reset_is_deterministic_per_stream() {
    for t in TaskName::ALL {
        let mut a = env(t.as_str(), 7);
        let mut b = env(t.as_str(), 7);
        assert_eq!(a.reset().unwrap(), b.reset().unwrap(), "{t}");
        assert_eq!(a.state(), b.state());
    }
}

#[test]
fn reset_observation_shape_and_stack() {
    for t in TaskName::ALL {
        let mut e = env(t.as_str(), 1);
        let obs = e.reset().unwrap();
        assert_eq!(obs.shape(), e.spec().obs_shape());
        for i in 1..obs.frames() {
            assert_eq!(obs.frame(0), obs.frame(i));
        }
        for i in 0..obs.pixels().len() {
            let v = obs.value(i);
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(obs.pixels().iter().any(|&p| p > 0), "{t} renders nothing");
    }
}

#[test]
fn reacher_targets_cover_the_arena() {
    let mut e = env("reacher_easy", 3);
    let mut cells = [[false; 8]; 8];
    for _ in 0..1000 {
        e.reset().unwrap();
        let s = e.state().values;
        let cell = |v: f64| {
            (((v + REACHER_ARENA_HALF) / (2.0 * REACHER_ARENA_HALF) * 8.0) as usize).min(7)
        };
        cells[cell(s[4])][cell(s[5])] = true;
    }
    let covered = cells.iter().flatten().filter(|&&c| c).count();
    assert!(covered as f64 >= 0.9 * 64.0, "covered {covered}/64");
}

#[test]
fn episodes_have_fixed_length_and_bounded_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in TaskName::ALL {
        let over = SpecOverrides {
            horizon: Some(200),
            ..Default::default()
        };
        let mut e = make_task(t.as_str(), &over, stream(5, Stream::Env)).unwrap();
        let spec = e.spec().clone();
        let shape = spec.obs_shape();
        e.reset().unwrap();
        let mut n = 0;
        loop {
            let a: Vec<f32> = (0..spec.action_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let out = e.step(&a).unwrap();
            n += 1;
            assert!(out.reward >= 0.0 && out.reward <= spec.action_repeat as f64, "{t}");
            assert_eq!(out.obs.shape(), shape);
            if out.done {
                break;
            }
            assert!(n < 10_000);
        }
        assert_eq!(n, spec.episode_len(), "{t}");
        assert!(e.step(&vec![0.0; spec.action_dim]).is_err());
    }
}

#[test]
fn transitions_are_markov_in_state_and_action() {
    let mut a = env("cartpole_swingup", 2);
    a.reset().unwrap();
    for _ in 0..5 {
        a.step(&[0.4]).unwrap();
    }
    let mut b = a.clone();
    let oa = a.step(&[-0.3]).unwrap();
    let ob = b.step(&[-0.3]).unwrap();
    assert_eq!(oa.obs, ob.obs);
    assert_eq!(oa.reward, ob.reward);
    assert_eq!(a.state(), b.state());
}

#[test]
fn random_policy_rarely_solves_reacher_hard() {
    let mut e = env("reacher_hard", 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let horizon = e.spec().horizon as f64;
    let mut total = 0.0;
    let episodes = 100;
    for _ in 0..episodes {
        e.reset().unwrap();
        loop {
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let out = e.step(&a).unwrap();
            total += out.reward;
            if out.done {
                break;
            }
        }
    }
    let mean = total / episodes as f64;
    assert!(mean < 0.05 * horizon, "mean episode reward {mean}");
}

#[test]
fn frame_dump_writes_pgm_files() {
    let dir = tempfile::tempdir().unwrap();
    let over = SpecOverrides {
        horizon: Some(8),
        ..Default::default()
    };
    let mut e = make_task("ball_in_cup", &over, stream(0, Stream::Env)).unwrap();
    e.enable_frame_dump(dir.path()).unwrap();
    e.reset().unwrap();
    e.step(&[0.0, 0.0]).unwrap();
    e.step(&[0.0, 0.0]).unwrap();
    let n = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(n, 3);
}
