//! Representation pretraining before task training.

use std::path::Path;

use crate::error::Result;

use super::config::{ExperimentConfig, PretrainMode};
use super::train::{Learner, RunMode, Trainer};

/// Runs the configured pretraining phase and returns the learned state, or
/// `None` when pretraining is off.
pub fn pretrain(config: &ExperimentConfig, out: Option<&Path>) -> Result<Option<Learner>> {
    let mode = match config.pretrain.mode {
        PretrainMode::None => return Ok(None),
        PretrainMode::Random => RunMode::RandomSrl,
        PretrainMode::Cure => RunMode::CureOnly,
    };
    let mut pre = config.clone();
    pre.steps = config.pretrain.steps;
    pre.pretrain.mode = PretrainMode::None;
    pre.checkpoint.every = 0;
    if mode == RunMode::CureOnly {
        pre.cure.enabled = true;
        pre.cure.single_policy = false;
    }
    let mut t = Trainer::new(pre, mode, out)?;
    t.run()?;
    Ok(Some(t.learner))
}

/// Pretraining (if any) followed by task training with a fresh replay buffer.
pub fn train_with_pretraining(config: ExperimentConfig, out: Option<&Path>) -> Result<Trainer> {
    let pre_out = out.map(|d| d.join("pretrain"));
    let learner = pretrain(&config, pre_out.as_deref())?;
    let mut t = match learner {
        None => Trainer::new(config, RunMode::Full, out)?,
        Some(mut l) => {
            if !config.cure.has_curious_agent() {
                l.curious = None;
            } else if l.curious.is_none() {
                l.curious = Learner::new(&config, l.task.action_dim, true)?.curious;
            }
            Trainer::with_learner(config, RunMode::Full, l, out)?
        }
    };
    t.run()?;
    Ok(t)
}
