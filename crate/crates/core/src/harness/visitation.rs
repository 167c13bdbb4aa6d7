//! Scores the observations visited by different policies with one frozen
//! reference representation.

use std::path::Path;

use cure_autodiff::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cure::random_action;
use crate::envs::{pixel_value, Env, Observation};
use crate::error::{Error, Result};
use crate::replay::{center_crop_tensor, random_crop};
use crate::rng::{stream, Stream};
use crate::srl::{SrlHead, SrlInput};

use super::checkpoint;
use super::config::ExperimentConfig;
use super::train::{run_cure_only, Learner, RunMode, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visitor {
    Random,
    Task,
    Curious,
}

impl Visitor {
    pub fn as_str(self) -> &'static str {
        match self {
            Visitor::Random => "random",
            Visitor::Task => "task",
            Visitor::Curious => "curious",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitationRow {
    pub policy: String,
    pub observations: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Observations visited over `episodes` stochastic rollouts.
pub fn rollout(
    config: &ExperimentConfig,
    policy: Visitor,
    learner: &Learner,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Observation>> {
    let mut env = Env::new(config.task, &config.env_overrides(), stream(config.seed, Stream::Visitation))?;
    let crop = config.crop();
    let d = env.spec().action_dim;
    let mut seen = Vec::new();
    for _ in 0..episodes {
        let mut obs = env.reset()?;
        loop {
            let action = match policy {
                Visitor::Random => random_action(d, rng),
                Visitor::Task => {
                    let x = center_crop_tensor(&obs, crop)?;
                    learner.task.act(&learner.spec, &learner.encoder, &x, false, rng)?
                }
                Visitor::Curious => {
                    let agent = learner.curious.as_ref().ok_or_else(|| {
                        Error::InvalidArgument("no curious agent to roll out".into())
                    })?;
                    let x = center_crop_tensor(&obs, crop)?;
                    agent.act(&learner.spec, &learner.encoder, &x, false, rng)?
                }
            };
            seen.push(obs);
            let out = env.step(&action)?;
            obs = out.obs;
            if out.done {
                seen.push(obs);
                break;
            }
        }
    }
    Ok(seen)
}

/// Chunk ranges of at most `size` (one more for the last), never leaving a
/// single trailing element, which would have no in-batch negative.
fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(size)
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        out.pop();
        out.last_mut().expect("two ranges").end = n;
    }
    out
}

/// Per-observation error under the reference representation.
pub fn score(
    config: &ExperimentConfig,
    reference: &Learner,
    observations: &[Observation],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let crop = config.crop();
    let mut out = Vec::with_capacity(observations.len());
    for range in chunks(observations.len(), 64) {
        let chunk = &observations[range];
        match reference.srl.config.head {
            SrlHead::Rae => {
                let x = stack(chunk, |o| center_crop_tensor(o, crop))?;
                out.extend(reference.srl.errors(&reference.encoder, SrlInput::Rae { obs: &x })?);
            }
            SrlHead::Contrastive => {
                let mut view = |o: &Observation| -> Result<Tensor<f32>> {
                    let shape = o.shape();
                    let px = random_crop(o.pixels(), shape, crop, rng)?;
                    let v = px.iter().map(|&p| pixel_value(p)).collect();
                    Ok(Tensor::new(&[1, shape[0], crop, crop], v)?)
                };
                let mut a = Vec::with_capacity(chunk.len());
                let mut p = Vec::with_capacity(chunk.len());
                for o in chunk {
                    a.push(view(o)?);
                    p.push(view(o)?);
                }
                let anchor = stack(&a, |t| Ok(t.clone()))?;
                let positive = stack(&p, |t| Ok(t.clone()))?;
                out.extend(reference.srl.errors(
                    &reference.encoder,
                    SrlInput::Contrastive {
                        anchor: &anchor,
                        positive: &positive,
                    },
                )?);
            }
        }
    }
    Ok(out)
}

/// Stacks `[1, S, C, C]` views into `[B, S, C, C]`.
fn stack<X>(items: &[X], f: impl FnMut(&X) -> Result<Tensor<f32>>) -> Result<Tensor<f32>> {
    let parts = items.iter().map(f).collect::<Result<Vec<_>>>()?;
    let singles: Vec<Tensor<f32>> = parts.iter().map(|t| t.index_axis0(0)).collect();
    Ok(Tensor::stack(&singles)?)
}

pub fn summarize(policy: Visitor, errors: &[f32]) -> Result<VisitationRow> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("no observations to summarize".into()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &e in errors {
        let e = e as f64;
        min = min.min(e);
        max = max.max(e);
        sum += e;
    }
    Ok(VisitationRow {
        policy: policy.as_str().to_string(),
        observations: errors.len(),
        min,
        mean: sum / errors.len() as f64,
        max,
    })
}

pub const CURIOUS_CHECKPOINT: &str = "curious.ckpt";
pub const TASK_CHECKPOINT: &str = "task.ckpt";

/// Scores random, task and curious visitation with the representation saved
/// in `curious_ckpt`. Missing checkpoints are an error.
pub fn score_from_checkpoints(
    config: &ExperimentConfig,
    curious_ckpt: &Path,
    task_ckpt: &Path,
    episodes: usize,
) -> Result<Vec<VisitationRow>> {
    for p in [curious_ckpt, task_ckpt] {
        if !p.is_file() {
            return Err(Error::Checkpoint(format!(
                "reference checkpoint {} does not exist",
                p.display()
            )));
        }
    }
    let cure = checkpoint::restore(cure_config(config), curious_ckpt, None)?;
    let task = checkpoint::restore(task_config(config), task_ckpt, None)?;
    let reference = &cure.learner;
    let mut rows = Vec::new();
    for (policy, learner) in [
        (Visitor::Random, reference),
        (Visitor::Task, &task.learner),
        (Visitor::Curious, reference),
    ] {
        let mut rng = stream(config.seed, Stream::Visitation);
        let seen = rollout(config, policy, learner, episodes, &mut rng)?;
        let errors = score(config, reference, &seen, &mut rng)?;
        rows.push(summarize(policy, &errors)?);
    }
    Ok(rows)
}

fn cure_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    c.cure.enabled = true;
    c.cure.single_policy = false;
    c
}

fn task_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    c.cure.enabled = false;
    c
}

/// Trains a curiosity-only run and a task-only run for `config.steps`
/// interactions, checkpoints both under `out`, then scores visitation.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Vec<VisitationRow>> {
    std::fs::create_dir_all(out)?;
    let cure = run_cure_only(cure_config(config), config.steps, None)?;
    force_boundary_save(&cure, &out.join(CURIOUS_CHECKPOINT))?;
    let mut task = Trainer::new(task_config(config), RunMode::Full, None)?;
    task.run()?;
    force_boundary_save(&task, &out.join(TASK_CHECKPOINT))?;
    let rows = score_from_checkpoints(
        config,
        &out.join(CURIOUS_CHECKPOINT),
        &out.join(TASK_CHECKPOINT),
        config.eval.episodes,
    )?;
    write_csv(&out.join("visitation.csv"), &rows)?;
    Ok(rows)
}

fn force_boundary_save(t: &Trainer, path: &Path) -> Result<()> {
    if !t.at_boundary() {
        return Err(Error::Checkpoint(format!(
            "run stopped mid-episode at step {}; use a multiple of the episode length",
            t.step
        )));
    }
    checkpoint::save(t, path)
}

pub fn write_csv(path: &Path, rows: &[VisitationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Metrics(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Metrics(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
