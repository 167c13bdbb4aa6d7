//! Finite-difference checks over every differentiable op and loss in use.

use cure_autodiff::{grad_check, AutodiffError, GradCheckOptions, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::sac::{actor_loss, alpha_loss, critic_loss, init_mlp};
use crate::srl::{infonce_loss, rae_loss, EncoderSpec};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Fun = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> cure_autodiff::Result<Var>>;

fn wrap<T>(r: Result<T>) -> cure_autodiff::Result<T> {
    r.map_err(|e| AutodiffError::InvalidArgument {
        op: "gradsuite",
        msg: e.to_string(),
    })
}

/// Random biases keep ReLU units away from their kink.
fn jitter_biases(p: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for i in 0..p.len() {
        let name = p.name(i).to_string();
        if name.ends_with(".b") && !name.starts_with("ln") {
            let shape = p.get(i).shape().to_vec();
            *p.get_mut(i) = Tensor::uniform(&shape, -0.2, 0.2, rng);
        }
    }
}

fn tiny_spec() -> EncoderSpec {
    EncoderSpec::new(1, 15, 2, 3).expect("valid spec")
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Fun, Vec<Tensor<f64>>)> {
    let u = |s: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng| Tensor::<f64>::uniform(s, lo, hi, r);
    let mut v: Vec<(&'static str, Fun, Vec<Tensor<f64>>)> = Vec::new();
    v.push((
        "matmul",
        Box::new(|t, x| {
            let y = t.matmul(x[0], x[1])?;
            let y = t.square(y);
            Ok(t.sum_all(y))
        }),
        vec![u(&[3, 4], -1.0, 1.0, rng), u(&[4, 2], -1.0, 1.0, rng)],
    ));
    v.push((
        "dense_relu",
        Box::new(|t, x| {
            let y = t.dense(x[0], x[1], x[2])?;
            let y = t.relu(y);
            let y = t.square(y);
            Ok(t.mean_all(y))
        }),
        vec![u(&[3, 4], 0.1, 1.0, rng), u(&[4, 2], 0.1, 1.0, rng), u(&[2], 0.1, 0.5, rng)],
    ));
    v.push((
        "conv2d",
        Box::new(|t, x| {
            let y = t.conv2d(x[0], x[1], 2)?;
            let y = t.square(y);
            Ok(t.sum_all(y))
        }),
        vec![u(&[2, 2, 7, 7], -1.0, 1.0, rng), u(&[3, 2, 3, 3], -1.0, 1.0, rng)],
    ));
    v.push((
        "conv_transpose2d",
        Box::new(|t, x| {
            let y = t.conv_transpose2d(x[0], x[1], 2, 1)?;
            let y = t.square(y);
            Ok(t.sum_all(y))
        }),
        vec![u(&[2, 3, 4, 4], -1.0, 1.0, rng), u(&[3, 2, 3, 3], -1.0, 1.0, rng)],
    ));
    v.push((
        "elementwise",
        Box::new(|t, x| {
            let a = t.tanh(x[0]);
            let b = t.exp(x[0]);
            let c = t.log(x[1])?;
            let d = t.softplus(x[0]);
            let s = t.add(a, b)?;
            let s = t.mul(s, c)?;
            let s = t.sub(s, d)?;
            let m = t.minimum(s, x[2])?;
            let m = t.scale_by(m, x[3])?;
            Ok(t.sum_all(m))
        }),
        vec![
            u(&[2, 3], -1.0, 1.0, rng),
            u(&[2, 3], 0.5, 2.0, rng),
            u(&[2, 3], -3.0, 3.0, rng),
            u(&[1], 0.5, 1.5, rng),
        ],
    ));
    v.push((
        "layer_norm",
        Box::new(|t, x| {
            let y = t.layer_norm(x[0], x[1], x[2])?;
            let w = t.constant(Tensor::from_f64(&[2, 5], &[0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.7, -0.6, 0.05, 0.9])?);
            let y = t.mul(y, w)?;
            let y = t.tanh(y);
            Ok(t.sum_all(y))
        }),
        vec![u(&[2, 5], -1.0, 1.0, rng), u(&[5], 0.5, 1.5, rng), u(&[5], -0.5, 0.5, rng)],
    ));
    v.push((
        "structural",
        Box::new(|t, x| {
            let c = t.concat_cols(x[0], x[1])?;
            let n = t.narrow_cols(c, 1, 3)?;
            let r = t.reshape(n, &[3, 2])?;
            let tr = t.transpose(r)?;
            let s = t.sum(tr, Some(0))?;
            let s = t.square(s);
            let m = t.mean(s, None)?;
            Ok(m)
        }),
        vec![u(&[2, 2], -1.0, 1.0, rng), u(&[2, 3], -1.0, 1.0, rng)],
    ));
    v.push((
        "cross_entropy",
        Box::new(|t, x| {
            let per = t.cross_entropy(x[0], &[0, 2, 1])?;
            Ok(t.mean_all(per))
        }),
        vec![u(&[3, 4], -2.0, 2.0, rng)],
    ));
    v
}

fn check(f: &Fun, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let report = grad_check(
        f,
        inputs,
        GradCheckOptions {
            h,
            ..Default::default()
        },
    )?;
    Ok(report.max_rel_error())
}

/// Runs every case; `seed` fixes inputs and parameters.
pub fn run(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, f, inputs) in op_cases(&mut rng) {
        out.push(GradCase {
            name,
            max_rel_error: check(&f, &inputs, 1e-6)?,
        });
    }

    let spec = tiny_spec();
    let mut enc = spec.init_encoder::<f64, _>(&mut rng);
    jitter_biases(&mut enc, &mut rng);
    let mut dec = spec.init_decoder::<f64, _>(&mut rng);
    jitter_biases(&mut dec, &mut rng);
    let obs = Tensor::<f64>::uniform(&spec.input_shape(2), 0.0, 1.0, &mut rng);
    let ne = enc.len();

    let mut inputs: Vec<Tensor<f64>> = enc.tensors().to_vec();
    inputs.extend(dec.tensors().iter().cloned());
    let o = obs.clone();
    let f: Fun = Box::new(move |t, v| {
        let x = t.constant(o.clone());
        Ok(wrap(rae_loss(t, &spec, &v[..ne], &v[ne..], x, 0.1, 0.01))?.0)
    });
    out.push(GradCase {
        name: "rae_loss",
        max_rel_error: check(&f, &inputs, 1e-6)?,
    });

    let key = enc.clone();
    let positive = Tensor::<f64>::uniform(&spec.input_shape(3), 0.0, 1.0, &mut rng);
    let anchor = Tensor::<f64>::uniform(&spec.input_shape(3), 0.0, 1.0, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = enc.tensors().to_vec();
    inputs.push(Tensor::uniform(&[spec.z_dim, spec.z_dim], -1.0, 1.0, &mut rng));
    let f: Fun = Box::new(move |t, v| {
        let k = key.bind(t, false);
        let a = t.constant(anchor.clone());
        let p = t.constant(positive.clone());
        Ok(wrap(infonce_loss(t, &spec, &v[..ne], &k, v[ne], a, p))?.0)
    });
    out.push(GradCase {
        name: "infonce_loss",
        max_rel_error: check(&f, &inputs, 1e-6)?,
    });

    let (d, hdim) = (2, 8);
    let mut actor = ParamSet::<f64>::new();
    init_mlp(&mut actor, "actor", [spec.z_dim, hdim, hdim, 2 * d], &mut rng);
    jitter_biases(&mut actor, &mut rng);
    let mut critic = ParamSet::<f64>::new();
    init_mlp(&mut critic, "q1_", [spec.z_dim + d, hdim, hdim, 1], &mut rng);
    init_mlp(&mut critic, "q2_", [spec.z_dim + d, hdim, hdim, 1], &mut rng);
    jitter_biases(&mut critic, &mut rng);
    let eps = Tensor::<f64>::randn(&[2, d], 1.0, &mut rng);
    let (enc_a, critic_a, obs_a) = (enc.clone(), critic.clone(), obs.clone());
    let inputs: Vec<Tensor<f64>> = actor.tensors().to_vec();
    let f: Fun = Box::new(move |t, v| {
        let e = enc_a.bind(t, false);
        let c = critic_a.bind(t, false);
        let x = t.constant(obs_a.clone());
        Ok(wrap(actor_loss(t, &spec, &e, v, &c, x, &eps, 0.1, (-10.0, 2.0)))?.0)
    });
    out.push(GradCase {
        name: "actor_loss",
        max_rel_error: check(&f, &inputs, 1e-6)?,
    });

    let actions = Tensor::<f64>::uniform(&[2, d], -0.9, 0.9, &mut rng);
    let target = Tensor::<f64>::uniform(&[2], -1.0, 1.0, &mut rng);
    let nc = critic.len();
    let mut inputs: Vec<Tensor<f64>> = critic.tensors().to_vec();
    inputs.extend(enc.tensors().iter().cloned());
    let f: Fun = Box::new(move |t, v| {
        let x = t.constant(obs.clone());
        let a = t.constant(actions.clone());
        wrap(critic_loss(t, &spec, &v[nc..], &v[..nc], x, a, &target))
    });
    out.push(GradCase {
        name: "critic_loss",
        max_rel_error: check(&f, &inputs, 1e-6)?,
    });

    let lp = vec![0.3, -1.7, 0.9];
    let f: Fun = Box::new(move |t, v| wrap(alpha_loss(t, v[0], &lp, -2.0)));
    out.push(GradCase {
        name: "alpha_loss",
        max_rel_error: check(&f, &[Tensor::scalar(0.1f64.ln())], 1e-6)?,
    });
    Ok(out)
}
