//! Curiosity layer: intrinsic reward from the representation error, the
//! action-mixing rule and the curious agent update.

use cure_autodiff::{ParamSet, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sac::{SacAgent, UpdateInput, UpdateStats};
use crate::srl::EncoderSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CuriosityConfig {
    pub enabled: bool,
    pub beta: f64,
    pub p_c: f64,
    pub gamma: f64,
    /// Adds the intrinsic reward to the task reward instead of training a
    /// second agent.
    pub single_policy: bool,
    pub critic_updates_encoder: bool,
}

impl Default for CuriosityConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            beta: 1.0,
            p_c: 0.2,
            gamma: 0.99,
            single_policy: false,
            critic_updates_encoder: true,
        }
    }
}

impl CuriosityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_c) {
            return Err(Error::Config(format!("cure.p_c {} outside [0, 1]", self.p_c)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("cure.beta {} must be nonnegative", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("cure.gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// Whether a separate curious agent exists.
    pub fn has_curious_agent(&self) -> bool {
        self.enabled && !self.single_policy
    }
}

/// `β · error` per sample.
pub fn intrinsic_reward(errors: &[f32], beta: f32) -> Vec<f32> {
    errors.iter().map(|&e| beta * e).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    Task,
    Curious,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SourceCounts {
    pub task: u64,
    pub curious: u64,
    pub random: u64,
}

impl SourceCounts {
    pub fn record(&mut self, s: ActionSource) {
        match s {
            ActionSource::Task => self.task += 1,
            ActionSource::Curious => self.curious += 1,
            ActionSource::Random => self.random += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.task + self.curious + self.random
    }

    /// Curious share of all recorded steps; zero when empty.
    pub fn curious_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.curious as f64 / n as f64,
        }
    }
}

/// Which policy acts at interaction `step`.
///
/// Seeding steps are random and draw nothing from `mixing`. Afterwards one
/// uniform `ε` is drawn per step when a mixing stream is given; `ε < p_c`
/// selects the curious policy.
pub fn choose_source<R: Rng + ?Sized>(
    step: u64,
    seeding_steps: u64,
    p_c: f64,
    mixing: Option<&mut R>,
) -> ActionSource {
    if step < seeding_steps {
        return ActionSource::Random;
    }
    match mixing {
        Some(rng) => {
            let eps: f64 = rng.random();
            if eps < p_c {
                ActionSource::Curious
            } else {
                ActionSource::Task
            }
        }
        None => ActionSource::Task,
    }
}

/// Uniform action in `[−1, 1)^d`.
pub fn random_action<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Everything needed to act from one cropped observation.
pub struct Policies<'a> {
    pub spec: &'a EncoderSpec,
    pub encoder: &'a ParamSet<f32>,
    pub task: &'a SacAgent,
    pub curious: Option<&'a SacAgent>,
}

/// Streams consumed by [`select_action`].
pub struct SelectRngs<'a, R: Rng + ?Sized> {
    pub seeding: &'a mut R,
    pub mixing: Option<&'a mut R>,
    pub task_noise: &'a mut R,
    pub curious_noise: &'a mut R,
}

/// Mixing rule plus the chosen policy's stochastic action.
pub fn select_action<R: Rng + ?Sized>(
    policies: &Policies<'_>,
    obs: &Tensor<f32>,
    step: u64,
    seeding_steps: u64,
    p_c: f64,
    rngs: SelectRngs<'_, R>,
) -> Result<(Vec<f32>, ActionSource)> {
    let source = choose_source(step, seeding_steps, p_c, rngs.mixing);
    let action = match source {
        ActionSource::Random => random_action(policies.task.action_dim, rngs.seeding),
        ActionSource::Task => {
            policies
                .task
                .act(policies.spec, policies.encoder, obs, false, rngs.task_noise)?
        }
        ActionSource::Curious => {
            let agent = policies
                .curious
                .ok_or_else(|| Error::InvalidArgument("no curious agent to act".into()))?;
            agent.act(policies.spec, policies.encoder, obs, false, rngs.curious_noise)?
        }
    };
    Ok((action, source))
}

/// One curious SAC update driven only by intrinsic rewards.
#[allow(clippy::too_many_arguments)]
pub fn update_curious_agent<R: Rng + ?Sized>(
    agent: &mut SacAgent,
    spec: &EncoderSpec,
    encoder: &mut ParamSet<f32>,
    target_encoder: &ParamSet<f32>,
    obs: &Tensor<f32>,
    next_obs: &Tensor<f32>,
    actions: &Tensor<f32>,
    not_done: &[f32],
    intrinsic: &[f32],
    gamma: f32,
    step: u64,
    rng: &mut R,
) -> Result<UpdateStats> {
    let b = obs.shape()[0];
    if intrinsic.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} intrinsic rewards for a batch of {b}",
            intrinsic.len()
        )));
    }
    let input = UpdateInput {
        obs,
        next_obs,
        actions,
        rewards: intrinsic,
        not_done,
    };
    agent.update(spec, encoder, target_encoder, input, gamma, step, rng)
}
