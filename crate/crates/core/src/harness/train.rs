//! The interaction loop: act, step, store, then update SRL, the task agent
//! and the curious agent from one shared batch.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cure_autodiff::ParamSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cure::{
    intrinsic_reward, random_action, select_action, update_curious_agent, ActionSource,
    Policies, SelectRngs, SourceCounts,
};
use crate::envs::{Env, Observation};
use crate::error::{Error, Result};
use crate::replay::{center_crop_tensor, Augment, Batch, ReplayBuffer, Transition};
use crate::rng::{stream, Stream};
use crate::sac::{SacAgent, UpdateInput, UpdateStats};
use crate::srl::{EncoderSpec, Srl, SrlHead, SrlInput};

use super::config::ExperimentConfig;
use super::metrics::{Mean, MetricsRow, MetricsWriter};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Task agent plus, when enabled, the curious agent.
    Full,
    /// Curious agent acts after seeding; no task updates.
    CureOnly,
    /// Uniform random actions; only the representation learns.
    RandomSrl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Select,
    Env,
    Push,
    Sample,
    Srl,
    TaskAc,
    CuriousAc,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Select => "select",
            Phase::Env => "env",
            Phase::Push => "push",
            Phase::Sample => "sample",
            Phase::Srl => "srl",
            Phase::TaskAc => "task_ac",
            Phase::CuriousAc => "curious_ac",
        }
    }
}

/// All learned parameters and their optimizers.
#[derive(Clone, Debug)]
pub struct Learner {
    pub spec: EncoderSpec,
    pub encoder: ParamSet<f32>,
    pub target_encoder: ParamSet<f32>,
    pub srl: Srl,
    pub task: SacAgent,
    pub curious: Option<SacAgent>,
}

impl Learner {
    pub fn new(config: &ExperimentConfig, action_dim: usize, with_curious: bool) -> Result<Self> {
        let spec = config.encoder_spec()?;
        let mut shared = stream(config.seed, Stream::InitShared);
        let encoder = spec.init_encoder(&mut shared);
        let srl = Srl::new(spec, config.srl_config(), &encoder, &mut shared)?;
        let mut rng = stream(config.seed, Stream::InitTask);
        let task = SacAgent::new(config.sac_config(), spec.z_dim, action_dim, true, &mut rng)?;
        let curious = if with_curious {
            let mut rng = stream(config.seed, Stream::InitCurious);
            Some(SacAgent::new(
                config.sac_config(),
                spec.z_dim,
                action_dim,
                config.cure.critic_updates_encoder,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            target_encoder: encoder.clone(),
            encoder,
            srl,
            task,
            curious,
        })
    }
}

pub(crate) struct Rngs {
    pub seeding: ChaCha8Rng,
    pub mixing: ChaCha8Rng,
    pub replay: ChaCha8Rng,
    pub crop: ChaCha8Rng,
    pub task_noise: ChaCha8Rng,
    pub curious_noise: ChaCha8Rng,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Self {
            seeding: stream(seed, Stream::Seeding),
            mixing: stream(seed, Stream::Mixing),
            replay: stream(seed, Stream::Replay),
            crop: stream(seed, Stream::Crop),
            task_noise: stream(seed, Stream::TaskNoise),
            curious_noise: stream(seed, Stream::CuriousNoise),
        }
    }

    pub(crate) fn named(&self) -> [(&'static str, &ChaCha8Rng); 6] {
        [
            ("seeding", &self.seeding),
            ("mixing", &self.mixing),
            ("replay", &self.replay),
            ("crop", &self.crop),
            ("task_noise", &self.task_noise),
            ("curious_noise", &self.curious_noise),
        ]
    }

    pub(crate) fn named_mut(&mut self) -> [(&'static str, &mut ChaCha8Rng); 6] {
        [
            ("seeding", &mut self.seeding),
            ("mixing", &mut self.mixing),
            ("replay", &mut self.replay),
            ("crop", &mut self.crop),
            ("task_noise", &mut self.task_noise),
            ("curious_noise", &mut self.curious_noise),
        ]
    }
}

/// Means accumulated between two training rows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Accum {
    pub critic_loss: Mean,
    pub actor_loss: Mean,
    pub alpha_loss: Mean,
    pub srl_loss: Mean,
    pub cure_critic_loss: Mean,
    pub cure_actor_loss: Mean,
    pub cure_alpha_loss: Mean,
    pub intrinsic: Mean,
}

impl Accum {
    pub(crate) fn named_mut(&mut self) -> [(&'static str, &mut Mean); 8] {
        [
            ("critic_loss", &mut self.critic_loss),
            ("actor_loss", &mut self.actor_loss),
            ("alpha_loss", &mut self.alpha_loss),
            ("srl_loss", &mut self.srl_loss),
            ("cure_critic_loss", &mut self.cure_critic_loss),
            ("cure_actor_loss", &mut self.cure_actor_loss),
            ("cure_alpha_loss", &mut self.cure_alpha_loss),
            ("intrinsic", &mut self.intrinsic),
        ]
    }
}

pub(crate) struct Outputs {
    pub dir: PathBuf,
    pub train: MetricsWriter,
    pub eval: MetricsWriter,
}

pub const TRAIN_CSV: &str = "train.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// One training run.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub mode: RunMode,
    pub learner: Learner,
    pub env: Env,
    pub eval_env: Env,
    pub replay: ReplayBuffer,
    pub(crate) rngs: Rngs,
    pub step: u64,
    pub episode: u64,
    /// Total number of evaluations run.
    pub evaluations: u64,
    pub(crate) episode_reward: f64,
    pub(crate) obs: Option<Observation>,
    pub(crate) accum: Accum,
    pub(crate) counts: SourceCounts,
    pub(crate) phase_log: Option<Vec<(u64, Vec<Phase>)>>,
    pub(crate) outputs: Option<Outputs>,
    started: Instant,
    last_eval: Option<f64>,
}

impl Trainer {
    /// Fresh run. With `out`, `train.csv` and `eval.csv` are (re)created there.
    pub fn new(config: ExperimentConfig, mode: RunMode, out: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let env = Self::make_env(&config, Stream::Env)?;
        let with_curious = match mode {
            RunMode::Full => config.cure.has_curious_agent(),
            RunMode::CureOnly => true,
            RunMode::RandomSrl => false,
        };
        let learner = Learner::new(&config, env.spec().action_dim, with_curious)?;
        Self::with_learner(config, mode, learner, out)
    }

    /// Run that starts from already trained parameters.
    pub fn with_learner(
        config: ExperimentConfig,
        mode: RunMode,
        learner: Learner,
        out: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        let env = Self::make_env(&config, Stream::Env)?;
        let eval_env = Self::make_env(&config, Stream::EvalEnv)?;
        if learner.task.action_dim != env.spec().action_dim {
            return Err(Error::Config(format!(
                "learner acts in {} dimensions, task needs {}",
                learner.task.action_dim,
                env.spec().action_dim
            )));
        }
        if learner.spec != config.encoder_spec()? {
            return Err(Error::Config("learner encoder does not match the config".into()));
        }
        let outputs = match out {
            Some(dir) => Some(Outputs {
                dir: dir.to_path_buf(),
                train: MetricsWriter::create(&dir.join(TRAIN_CSV))?,
                eval: MetricsWriter::create(&dir.join(EVAL_CSV))?,
            }),
            None => None,
        };
        Ok(Self {
            replay: ReplayBuffer::new(config.replay.capacity)?,
            rngs: Rngs::new(config.seed),
            mode,
            learner,
            env,
            eval_env,
            step: 0,
            episode: 0,
            evaluations: 0,
            episode_reward: 0.0,
            obs: None,
            accum: Accum::default(),
            counts: SourceCounts::default(),
            phase_log: None,
            outputs,
            started: Instant::now(),
            last_eval: None,
            config,
        })
    }

    fn make_env(config: &ExperimentConfig, which: Stream) -> Result<Env> {
        Env::new(config.task, &config.env_overrides(), stream(config.seed, which))
    }

    /// Records the phases executed at every step from now on.
    pub fn record_phases(&mut self) {
        self.phase_log = Some(Vec::new());
    }

    pub fn phase_log(&self) -> Option<&[(u64, Vec<Phase>)]> {
        self.phase_log.as_deref()
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.outputs.as_ref().map(|o| o.dir.as_path())
    }

    /// Mean return of the most recent evaluation.
    pub fn last_eval(&self) -> Option<f64> {
        self.last_eval
    }

    fn curious_enabled(&self) -> bool {
        match self.mode {
            RunMode::Full => self.learner.curious.is_some() && self.config.cure.enabled,
            RunMode::CureOnly => true,
            RunMode::RandomSrl => false,
        }
    }

    fn p_c(&self) -> f64 {
        match self.mode {
            RunMode::CureOnly => 1.0,
            _ => self.config.cure.p_c,
        }
    }

    /// Runs until `config.steps` interactions have happened.
    pub fn run(&mut self) -> Result<()> {
        if self.step == 0 && self.evaluations == 0 && self.config.steps > 0 {
            self.evaluate_if_due()?;
        }
        while self.step < self.config.steps {
            self.step_once()?;
        }
        Ok(())
    }

    fn log_phase(&mut self, phase: Phase) {
        if let Some(log) = &mut self.phase_log {
            match log.last_mut() {
                Some((s, phases)) if *s == self.step => phases.push(phase),
                _ => log.push((self.step, vec![phase])),
            }
        }
    }

    /// One environment interaction and the updates that follow it.
    pub fn step_once(&mut self) -> Result<()> {
        let t = self.step;
        let wrap = move |phase: Phase| move |e: Error| Error::Training {
            step: t,
            phase: phase.as_str(),
            source: Box::new(e),
        };

        if self.obs.is_none() {
            self.obs = Some(self.env.reset().map_err(wrap(Phase::Env))?);
            self.episode_reward = 0.0;
        }
        let obs = self.obs.take().expect("observation present");

        self.log_phase(Phase::Select);
        let (action, source) = self.select(&obs, t).map_err(wrap(Phase::Select))?;
        self.counts.record(source);

        self.log_phase(Phase::Env);
        let out = self.env.step(&action).map_err(wrap(Phase::Env))?;

        self.log_phase(Phase::Push);
        self.replay
            .push(Transition {
                obs,
                action,
                reward: out.reward as f32,
                next_obs: out.obs.clone(),
                done: out.done,
            })
            .map_err(wrap(Phase::Push))?;

        if t >= self.config.seeding.steps && self.replay.len() >= self.config.batch_size {
            self.log_phase(Phase::Sample);
            let batch = self.sample().map_err(wrap(Phase::Sample))?;
            self.log_phase(Phase::Srl);
            let errors = self.srl_step(&batch, t).map_err(wrap(Phase::Srl))?;
            let beta = self.config.cure.beta as f32;
            let intrinsic = if self.config.cure.enabled || self.mode == RunMode::CureOnly {
                let r = intrinsic_reward(&errors, beta);
                for &v in &r {
                    self.accum.intrinsic.push(v as f64);
                }
                Some(r)
            } else {
                None
            };
            // 1-based count of updates, which drives the actor/target schedules.
            let update = t - self.config.seeding.steps + 1;
            if self.mode == RunMode::Full {
                self.log_phase(Phase::TaskAc);
                self.task_step(&batch, intrinsic.as_deref(), update)
                    .map_err(wrap(Phase::TaskAc))?;
            }
            if self.curious_enabled() && !self.config.cure.single_policy {
                self.log_phase(Phase::CuriousAc);
                let intrinsic = intrinsic.expect("curiosity on");
                self.curious_step(&batch, &intrinsic, update)
                    .map_err(wrap(Phase::CuriousAc))?;
            }
        }

        self.episode_reward += out.reward;
        self.step += 1;
        self.obs = Some(out.obs);
        if out.done {
            self.finish_episode()?;
        }
        self.evaluate_if_due()?;
        if out.done {
            self.checkpoint_if_due()?;
        }
        Ok(())
    }

    fn select(&mut self, obs: &Observation, t: u64) -> Result<(Vec<f32>, ActionSource)> {
        let seeding = self.config.seeding.steps;
        if self.mode == RunMode::RandomSrl {
            let d = self.learner.task.action_dim;
            return Ok((random_action(d, &mut self.rngs.seeding), ActionSource::Random));
        }
        let x = center_crop_tensor(obs, self.config.crop())?;
        let use_mixing = self.curious_enabled() && !self.config.cure.single_policy;
        let policies = Policies {
            spec: &self.learner.spec,
            encoder: &self.learner.encoder,
            task: &self.learner.task,
            curious: self.learner.curious.as_ref(),
        };
        let p_c = self.p_c();
        let rngs = SelectRngs {
            seeding: &mut self.rngs.seeding,
            mixing: if use_mixing {
                Some(&mut self.rngs.mixing)
            } else {
                None
            },
            task_noise: &mut self.rngs.task_noise,
            curious_noise: &mut self.rngs.curious_noise,
        };
        select_action(&policies, &x, t, seeding, p_c, rngs)
    }

    fn sample(&mut self) -> Result<Batch> {
        let augment = match self.config.srl.head {
            SrlHead::Rae => Augment::Center,
            SrlHead::Contrastive => Augment::RandomWithPositive,
        };
        let indices = self
            .replay
            .sample_indices(self.config.batch_size, &mut self.rngs.replay)?;
        self.replay
            .gather(indices, self.config.crop(), augment, &mut self.rngs.crop)
    }

    fn srl_step(&mut self, batch: &Batch, t: u64) -> Result<Vec<f32>> {
        let input = SrlInput::from_batch(self.config.srl.head, batch)?;
        let l = &mut self.learner;
        if t % self.config.srl.decoder_freq == 0 {
            let up = l.srl.update(&mut l.encoder, input)?;
            self.accum.srl_loss.push(up.loss as f64);
            Ok(up.errors)
        } else {
            l.srl.errors(&l.encoder, input)
        }
    }

    fn update_target_encoder(&mut self, update: u64) -> Result<()> {
        if update % self.config.critic.target_freq == 0 {
            let l = &mut self.learner;
            l.target_encoder
                .polyak_toward(&l.encoder, self.config.encoder.tau as f32)?;
        }
        Ok(())
    }

    fn task_step(&mut self, batch: &Batch, intrinsic: Option<&[f32]>, update: u64) -> Result<()> {
        let rewards: Vec<f32> = match (self.config.cure.single_policy, intrinsic) {
            (true, Some(r)) => batch.rewards.iter().zip(r).map(|(a, b)| a + b).collect(),
            _ => batch.rewards.clone(),
        };
        let l = &mut self.learner;
        let input = UpdateInput {
            obs: &batch.obs,
            next_obs: &batch.next_obs,
            actions: &batch.actions,
            rewards: &rewards,
            not_done: &batch.not_done,
        };
        let stats = l.task.update(
            &l.spec,
            &mut l.encoder,
            &l.target_encoder,
            input,
            self.config.gamma as f32,
            update,
            &mut self.rngs.task_noise,
        )?;
        record(&mut self.accum, &stats, false);
        self.update_target_encoder(update)
    }

    fn curious_step(&mut self, batch: &Batch, intrinsic: &[f32], update: u64) -> Result<()> {
        let l = &mut self.learner;
        let agent = l
            .curious
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("no curious agent to update".into()))?;
        let stats = update_curious_agent(
            agent,
            &l.spec,
            &mut l.encoder,
            &l.target_encoder,
            &batch.obs,
            &batch.next_obs,
            &batch.actions,
            &batch.not_done,
            intrinsic,
            self.config.cure.gamma as f32,
            update,
            &mut self.rngs.curious_noise,
        )?;
        record(&mut self.accum, &stats, true);
        if self.mode == RunMode::CureOnly {
            self.update_target_encoder(update)?;
        }
        Ok(())
    }

    fn skipped(&self) -> u64 {
        let l = &self.learner;
        l.srl.skipped_steps
            + l.task.skipped_updates
            + l.curious.as_ref().map_or(0, |c| c.skipped_updates)
    }

    fn wall_clock(&self) -> f64 {
        if self.config.log.wall_clock {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn finish_episode(&mut self) -> Result<()> {
        let a = &mut self.accum;
        let row = MetricsRow {
            step: self.step,
            episode: self.episode,
            episode_reward: self.episode_reward,
            critic_loss: a.critic_loss.take(),
            actor_loss: a.actor_loss.take(),
            alpha_loss: a.alpha_loss.take(),
            alpha: Some(self.learner.task.alpha() as f64),
            srl_loss: a.srl_loss.take(),
            cure_critic_loss: a.cure_critic_loss.take(),
            cure_actor_loss: a.cure_actor_loss.take(),
            cure_alpha_loss: a.cure_alpha_loss.take(),
            cure_alpha: self.learner.curious.as_ref().map(|c| c.alpha() as f64),
            intrinsic_reward: a.intrinsic.take(),
            curious_fraction: self.counts.curious_fraction(),
            skipped_updates: self.skipped(),
            wall_clock: self.wall_clock(),
        };
        self.counts = SourceCounts::default();
        self.episode += 1;
        self.episode_reward = 0.0;
        self.obs = None;
        if let Some(o) = &mut self.outputs {
            o.train.write(&row)?;
        }
        Ok(())
    }

    fn evaluate_if_due(&mut self) -> Result<()> {
        if self.mode != RunMode::Full
            || self.config.eval.episodes == 0
            || self.step % self.config.eval.interval != 0
        {
            return Ok(());
        }
        let mean = self.evaluate(self.config.eval.episodes)?;
        self.evaluations += 1;
        self.last_eval = Some(mean);
        let row = MetricsRow {
            step: self.step,
            episode: self.episode,
            episode_reward: mean,
            alpha: Some(self.learner.task.alpha() as f64),
            skipped_updates: self.skipped(),
            wall_clock: self.wall_clock(),
            ..MetricsRow::default()
        };
        if let Some(o) = &mut self.outputs {
            o.eval.write(&row)?;
        }
        Ok(())
    }

    /// Mean return of the deterministic task policy on the evaluation env.
    /// Touches no training stream or parameter.
    pub fn evaluate(&mut self, episodes: usize) -> Result<f64> {
        let crop = self.config.crop();
        let l = &self.learner;
        // Deterministic actions draw nothing; this stream is never read.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for _ in 0..episodes {
            let mut obs = self.eval_env.reset()?;
            loop {
                let x = center_crop_tensor(&obs, crop)?;
                let a = l.task.act(&l.spec, &l.encoder, &x, true, &mut unused)?;
                let out = self.eval_env.step(&a)?;
                total += out.reward;
                obs = out.obs;
                if out.done {
                    break;
                }
            }
        }
        Ok(total / episodes.max(1) as f64)
    }

    fn checkpoint_if_due(&mut self) -> Result<()> {
        let every = self.config.checkpoint.every;
        if every == 0 || self.episode % every != 0 {
            return Ok(());
        }
        if let Some(dir) = self.output_dir().map(Path::to_path_buf) {
            super::checkpoint::save(self, &dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }

    /// Whether the run sits at an episode boundary, where it can be saved.
    pub fn at_boundary(&self) -> bool {
        self.obs.is_none()
    }
}

fn record(a: &mut Accum, s: &UpdateStats, curious: bool) {
    let (c, ac, al) = if curious {
        (
            &mut a.cure_critic_loss,
            &mut a.cure_actor_loss,
            &mut a.cure_alpha_loss,
        )
    } else {
        (&mut a.critic_loss, &mut a.actor_loss, &mut a.alpha_loss)
    };
    c.push_opt(s.critic_loss);
    ac.push_opt(s.actor_loss);
    al.push_opt(s.alpha_loss);
}

/// Plain training run.
pub fn train(config: ExperimentConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(config, RunMode::Full, out)?;
    t.run()?;
    Ok(t)
}

/// Curious agent only for `steps` interactions.
pub fn run_cure_only(config: ExperimentConfig, steps: u64, out: Option<&Path>) -> Result<Trainer> {
    let mut config = config;
    config.steps = steps;
    config.cure.enabled = true;
    config.cure.single_policy = false;
    let mut t = Trainer::new(config, RunMode::CureOnly, out)?;
    t.run()?;
    Ok(t)
}
