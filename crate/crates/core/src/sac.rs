//! Soft actor-critic on encoder latents.

use cure_autodiff::{Adam, AdamConfig, AutodiffError, ParamSet, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::srl::{fan_in_uniform, EncoderSpec};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub hidden_dim: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    /// Adam β₁ for the temperature.
    pub alpha_beta1: f64,
    pub init_temperature: f64,
    pub tau: f64,
    pub actor_update_freq: u64,
    pub target_update_freq: u64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 1024,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            alpha_lr: 1e-4,
            alpha_beta1: 0.5,
            init_temperature: 0.1,
            tau: 0.01,
            actor_update_freq: 2,
            target_update_freq: 2,
            log_std_min: -10.0,
            log_std_max: 2.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.actor_update_freq == 0 || self.target_update_freq == 0 {
            return Err(Error::Config("update frequencies must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.log_std_min < self.log_std_max) {
            return Err(Error::Config("log std bounds are inverted".into()));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::Config("initial temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Three dense layers `in → h → h → out` named `{prefix}{0,1,2}.{w,b}`.
pub fn init_mlp<T: Real, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    prefix: &str,
    dims: [usize; 4],
    rng: &mut R,
) {
    for i in 0..3 {
        params.add(
            format!("{prefix}{i}.w"),
            fan_in_uniform(&[dims[i], dims[i + 1]], dims[i], rng),
        );
        params.add(format!("{prefix}{i}.b"), Tensor::zeros(&[dims[i + 1]]));
    }
}

/// ReLU between layers, linear output. `p` holds six vars (w, b per layer).
pub fn mlp<T: Real>(tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..3 {
        h = tape.dense(h, p[2 * i], p[2 * i + 1])?;
        if i < 2 {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Actor head outputs: mean and bounded log standard deviation, each `[B, d]`.
pub fn actor_forward<T: Real>(
    tape: &mut Tape<T>,
    actor: &[Var],
    z: Var,
    log_std_bounds: (f64, f64),
) -> Result<(Var, Var)> {
    let out = mlp(tape, actor, z)?;
    let d = tape.shape(out)[1] / 2;
    let mu = tape.narrow_cols(out, 0, d)?;
    let raw = tape.narrow_cols(out, d, d)?;
    let t = tape.tanh(raw);
    let (lo, hi) = log_std_bounds;
    let half = 0.5 * (hi - lo);
    let log_std = tape.affine(t, T::lit(half), T::lit(lo + half));
    Ok((mu, log_std))
}

/// Reparameterized tanh-Gaussian sample and its log-density `[B]`.
///
/// With `eps = None` the action is `tanh(μ)` and the density is taken at the mode.
pub fn sample_action<T: Real>(
    tape: &mut Tape<T>,
    actor: &[Var],
    z: Var,
    eps: Option<&Tensor<T>>,
    log_std_bounds: (f64, f64),
) -> Result<(Var, Var)> {
    let (mu, log_std) = actor_forward(tape, actor, z, log_std_bounds)?;
    let shape = tape.shape(mu).to_vec();
    let eps = match eps {
        Some(e) => {
            if e.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    what: "action noise",
                    expected: shape,
                    got: e.shape().to_vec(),
                });
            }
            e.clone()
        }
        None => Tensor::zeros(&shape),
    };
    let e = tape.constant(eps);
    let std = tape.exp(log_std);
    let noise = tape.mul(std, e)?;
    let u = tape.add(mu, noise)?;
    let a = tape.tanh(u);
    // Gaussian term: −ε²/2 − log σ − ln(2π)/2 per dimension.
    let e2 = tape.square(e);
    let g = tape.affine(e2, T::lit(-0.5), T::lit(-0.5 * LN_2PI));
    let g = tape.sub(g, log_std)?;
    // Squash correction: 2(ln 2 − u − softplus(−2u)).
    let m2u = tape.affine(u, T::lit(-2.0), T::zero());
    let sp = tape.softplus(m2u);
    let c = tape.add(u, sp)?;
    let c = tape.affine(c, T::lit(-2.0), T::lit(2.0 * std::f64::consts::LN_2));
    let lp = tape.sub(g, c)?;
    let lp = tape.sum(lp, Some(1))?;
    Ok((a, lp))
}

/// Twin Q-values `[B, 1]` for `concat(z, a)`. `critic` holds twelve vars.
pub fn critic_forward<T: Real>(tape: &mut Tape<T>, critic: &[Var], z: Var, a: Var) -> Result<(Var, Var)> {
    let x = tape.concat_cols(z, a)?;
    let q1 = mlp(tape, &critic[..6], x)?;
    let q2 = mlp(tape, &critic[6..12], x)?;
    Ok((q1, q2))
}

/// Largest `f32` below one; `tanh` saturates to ±1 in single precision.
const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Clamps an action component into the open interval `(−1, 1)`.
pub fn strictly_inside(a: f32) -> f32 {
    a.clamp(-BELOW_ONE, BELOW_ONE)
}

/// `y = r + γ·(1 − done)·(min(Q̄₁, Q̄₂) − α·log π)`, elementwise.
pub fn td_target(
    rewards: &[f32],
    not_done: &[f32],
    gamma: f32,
    q1: &[f32],
    q2: &[f32],
    alpha: f32,
    log_prob: &[f32],
) -> Vec<f32> {
    (0..rewards.len())
        .map(|i| rewards[i] + gamma * not_done[i] * (q1[i].min(q2[i]) - alpha * log_prob[i]))
        .collect()
}

/// Actor objective `mean(α·log π − min(Q₁, Q₂))` with the latent detached
/// from the encoder and the critic held fixed. Returns `(loss, log_prob)`.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &EncoderSpec,
    enc: &[Var],
    actor: &[Var],
    critic: &[Var],
    obs: Var,
    eps: &Tensor<T>,
    alpha: T,
    log_std_bounds: (f64, f64),
) -> Result<(Var, Var)> {
    let z = spec.encode(tape, enc, obs)?;
    let z = tape.detach(z);
    let (a, lp) = sample_action(tape, actor, z, Some(eps), log_std_bounds)?;
    let (q1, q2) = critic_forward(tape, critic, z, a)?;
    let q = tape.minimum(q1, q2)?;
    let b = tape.shape(q)[0];
    let q = tape.reshape(q, &[b])?;
    let alp = tape.affine(lp, alpha, T::zero());
    let diff = tape.sub(alp, q)?;
    Ok((tape.mean_all(diff), lp))
}

/// Critic objective: summed MSE of both critics against the fixed target.
pub fn critic_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &EncoderSpec,
    enc: &[Var],
    critic: &[Var],
    obs: Var,
    actions: Var,
    target: &Tensor<T>,
) -> Result<Var> {
    let z = spec.encode(tape, enc, obs)?;
    let (q1, q2) = critic_forward(tape, critic, z, actions)?;
    let b = tape.shape(q1)[0];
    let y = tape.constant(target.reshape(&[b, 1])?);
    let d1 = tape.sub(q1, y)?;
    let d1 = tape.square(d1);
    let l1 = tape.mean_all(d1);
    let d2 = tape.sub(q2, y)?;
    let d2 = tape.square(d2);
    let l2 = tape.mean_all(d2);
    Ok(tape.add(l1, l2)?)
}

/// Temperature objective `−α·mean(log π + H*)` with `log π` detached.
pub fn alpha_loss<T: Real>(tape: &mut Tape<T>, log_alpha: Var, log_prob: &[T], target_entropy: T) -> Result<Var> {
    let n = T::lit(log_prob.len() as f64);
    let m = log_prob.iter().map(|&l| l + target_entropy).sum::<T>() / n;
    let alpha = tape.exp(log_alpha);
    Ok(tape.affine(alpha, -m, T::zero()))
}

/// Observations and targets consumed by one agent update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateInput<'a> {
    pub obs: &'a Tensor<f32>,
    pub next_obs: &'a Tensor<f32>,
    pub actions: &'a Tensor<f32>,
    pub rewards: &'a [f32],
    pub not_done: &'a [f32],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: Option<f32>,
    pub actor_loss: Option<f32>,
    pub alpha_loss: Option<f32>,
    pub alpha: f32,
    pub mean_target: Option<f32>,
    pub skipped: u32,
}

#[derive(Clone, Debug)]
pub struct SacAgent {
    pub config: SacConfig,
    pub action_dim: usize,
    pub actor: ParamSet<f32>,
    pub critic: ParamSet<f32>,
    pub critic_target: ParamSet<f32>,
    pub log_alpha: ParamSet<f32>,
    pub actor_opt: Adam<f32>,
    pub critic_opt: Adam<f32>,
    pub alpha_opt: Adam<f32>,
    /// Whether critic gradients are applied to the shared encoder.
    pub critic_updates_encoder: bool,
    pub skipped_updates: u64,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(
        config: SacConfig,
        z_dim: usize,
        action_dim: usize,
        critic_updates_encoder: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if action_dim == 0 || z_dim == 0 {
            return Err(Error::Config("agent dimensions must be positive".into()));
        }
        let h = config.hidden_dim;
        let mut actor = ParamSet::new();
        init_mlp(&mut actor, "actor", [z_dim, h, h, 2 * action_dim], rng);
        let mut critic = ParamSet::new();
        init_mlp(&mut critic, "q1_", [z_dim + action_dim, h, h, 1], rng);
        init_mlp(&mut critic, "q2_", [z_dim + action_dim, h, h, 1], rng);
        let mut log_alpha = ParamSet::new();
        log_alpha.add("log_alpha", Tensor::scalar(config.init_temperature.ln() as f32));
        Ok(Self {
            config,
            action_dim,
            critic_target: critic.clone(),
            actor,
            critic,
            log_alpha,
            actor_opt: Adam::new(AdamConfig::with_lr(config.actor_lr)),
            critic_opt: Adam::new(AdamConfig::with_lr(config.critic_lr)),
            alpha_opt: Adam::new(AdamConfig {
                beta1: config.alpha_beta1,
                ..AdamConfig::with_lr(config.alpha_lr)
            }),
            critic_updates_encoder,
            skipped_updates: 0,
        })
    }

    pub fn alpha(&self) -> f32 {
        self.log_alpha.get(0).item().exp()
    }

    pub fn target_entropy(&self) -> f32 {
        -(self.action_dim as f32)
    }

    fn bounds(&self) -> (f64, f64) {
        (self.config.log_std_min, self.config.log_std_max)
    }

    /// Action for a single observation `[1, S, C, C]`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        spec: &EncoderSpec,
        encoder: &ParamSet<f32>,
        obs: &Tensor<f32>,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let enc = encoder.bind(&mut tape, false);
        let actor = self.actor.bind(&mut tape, false);
        let x = tape.constant(obs.clone());
        let z = spec.encode(&mut tape, &enc, x)?;
        let b = tape.shape(z)[0];
        let eps = if deterministic {
            None
        } else {
            Some(Tensor::randn(&[b, self.action_dim], 1.0, rng))
        };
        let (a, _) = sample_action(&mut tape, &actor, z, eps.as_ref(), self.bounds())?;
        Ok(tape.value(a).data().iter().map(|&v| strictly_inside(v)).collect())
    }

    /// Bootstrapped targets computed without gradients.
    pub fn compute_target<R: Rng + ?Sized>(
        &self,
        spec: &EncoderSpec,
        target_encoder: &ParamSet<f32>,
        next_obs: &Tensor<f32>,
        rewards: &[f32],
        not_done: &[f32],
        gamma: f32,
        rng: &mut R,
    ) -> Result<Vec<f32>> {
        let b = next_obs.shape()[0];
        if rewards.len() != b || not_done.len() != b {
            return Err(Error::InvalidArgument(format!(
                "{} rewards and {} flags for a batch of {b}",
                rewards.len(),
                not_done.len()
            )));
        }
        let mut tape = Tape::new();
        let enc = target_encoder.bind(&mut tape, false);
        let actor = self.actor.bind(&mut tape, false);
        let critic = self.critic_target.bind(&mut tape, false);
        let x = tape.constant(next_obs.clone());
        let z = spec.encode(&mut tape, &enc, x)?;
        let eps = Tensor::randn(&[b, self.action_dim], 1.0, rng);
        let (a, lp) = sample_action(&mut tape, &actor, z, Some(&eps), self.bounds())?;
        let (q1, q2) = critic_forward(&mut tape, &critic, z, a)?;
        Ok(td_target(
            rewards,
            not_done,
            gamma,
            tape.value(q1).data(),
            tape.value(q2).data(),
            self.alpha(),
            tape.value(lp).data(),
        ))
    }

    /// One critic step. Returns `None` when skipped for non-finite values.
    #[allow(clippy::too_many_arguments)]
    pub fn update_critic<R: Rng + ?Sized>(
        &mut self,
        spec: &EncoderSpec,
        encoder: &mut ParamSet<f32>,
        target_encoder: &ParamSet<f32>,
        input: UpdateInput<'_>,
        gamma: f32,
        rng: &mut R,
    ) -> Result<Option<(f32, f32)>> {
        let y = self.compute_target(
            spec,
            target_encoder,
            input.next_obs,
            input.rewards,
            input.not_done,
            gamma,
            rng,
        )?;
        if y.iter().any(|v| !v.is_finite()) {
            log::warn!("skipping critic update: non-finite target");
            self.skipped_updates += 1;
            return Ok(None);
        }
        let mean_target = y.iter().sum::<f32>() / y.len() as f32;
        let target = Tensor::new(&[y.len()], y)?;
        let mut tape = Tape::new();
        let enc = encoder.bind(&mut tape, self.critic_updates_encoder);
        let critic = self.critic.bind(&mut tape, true);
        let x = tape.constant(input.obs.clone());
        let a = tape.constant(input.actions.clone());
        let loss = critic_loss(&mut tape, spec, &enc, &critic, x, a, &target)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            log::warn!("skipping critic update: non-finite loss");
            self.skipped_updates += 1;
            return Ok(None);
        }
        let mut grads = tape.backward(loss)?;
        let g_critic = ParamSet::collect_grads(&critic, &mut grads);
        // The encoder group is always present so the moment layout is stable.
        let g_enc = if self.critic_updates_encoder {
            ParamSet::collect_grads(&enc, &mut grads)
        } else {
            vec![None; encoder.len()]
        };
        let result = self
            .critic_opt
            .step(&mut [(encoder, &g_enc), (&mut self.critic, &g_critic)]);
        if !self.guard(result)? {
            return Ok(None);
        }
        Ok(Some((loss_value, mean_target)))
    }

    /// Actor then temperature step on the same sampled actions.
    pub fn update_actor_and_alpha<R: Rng + ?Sized>(
        &mut self,
        spec: &EncoderSpec,
        encoder: &ParamSet<f32>,
        obs: &Tensor<f32>,
        rng: &mut R,
    ) -> Result<Option<(f32, f32)>> {
        let b = obs.shape()[0];
        let eps = Tensor::randn(&[b, self.action_dim], 1.0, rng);
        let mut tape = Tape::new();
        let enc = encoder.bind(&mut tape, false);
        let actor = self.actor.bind(&mut tape, true);
        let critic = self.critic.bind(&mut tape, false);
        let x = tape.constant(obs.clone());
        let (loss, lp) = actor_loss(
            &mut tape,
            spec,
            &enc,
            &actor,
            &critic,
            x,
            &eps,
            self.alpha(),
            self.bounds(),
        )?;
        let actor_value = tape.value(loss).item();
        let log_prob = tape.value(lp).data().to_vec();
        if !actor_value.is_finite() {
            log::warn!("skipping actor update: non-finite loss");
            self.skipped_updates += 1;
            return Ok(None);
        }
        let mut grads = tape.backward(loss)?;
        let g_actor = ParamSet::collect_grads(&actor, &mut grads);
        let r = self.actor_opt.step(&mut [(&mut self.actor, &g_actor)]);
        if !self.guard(r)? {
            return Ok(None);
        }

        let mut tape = Tape::new();
        let la = self.log_alpha.bind(&mut tape, true);
        let loss = alpha_loss(&mut tape, la[0], &log_prob, self.target_entropy())?;
        let alpha_value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g = ParamSet::collect_grads(&la, &mut grads);
        let r = self.alpha_opt.step(&mut [(&mut self.log_alpha, &g)]);
        if !self.guard(r)? {
            return Ok(None);
        }
        Ok(Some((actor_value, alpha_value)))
    }

    pub fn update_target(&mut self) -> Result<()> {
        self.critic_target
            .polyak_toward(&self.critic, self.config.tau as f32)?;
        Ok(())
    }

    /// Critic every call, actor/temperature and target on their schedules.
    /// `step` is the 1-based count of updates so far for this agent.
    #[allow(clippy::too_many_arguments)]
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        spec: &EncoderSpec,
        encoder: &mut ParamSet<f32>,
        target_encoder: &ParamSet<f32>,
        input: UpdateInput<'_>,
        gamma: f32,
        step: u64,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let mut stats = UpdateStats::default();
        match self.update_critic(spec, encoder, target_encoder, input, gamma, rng)? {
            Some((l, y)) => {
                stats.critic_loss = Some(l);
                stats.mean_target = Some(y);
            }
            None => stats.skipped += 1,
        }
        if step % self.config.actor_update_freq == 0 {
            match self.update_actor_and_alpha(spec, encoder, input.obs, rng)? {
                Some((a, l)) => {
                    stats.actor_loss = Some(a);
                    stats.alpha_loss = Some(l);
                }
                None => stats.skipped += 1,
            }
        }
        if step % self.config.target_update_freq == 0 {
            self.update_target()?;
        }
        stats.alpha = self.alpha();
        Ok(stats)
    }

    fn guard(&mut self, r: cure_autodiff::Result<()>) -> Result<bool> {
        match r {
            Ok(()) => Ok(true),
            Err(AutodiffError::NonFinite { what }) => {
                log::warn!("skipping update: non-finite {what}");
                self.skipped_updates += 1;
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }
}
