use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cure::CuriosityConfig;
use crate::envs::{SpecOverrides, TaskName};
use crate::error::{Error, Result};
use crate::sac::SacConfig;
use crate::srl::{EncoderSpec, SrlConfig, SrlHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub render_size: usize,
    /// Defaults to `render_size − 4`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
    /// Defaults to the task's own value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_repeat: Option<usize>,
    pub horizon: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            render_size: 36,
            crop: None,
            action_repeat: None,
            horizon: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub capacity: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { capacity: 80_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub filters: usize,
    pub z_dim: usize,
    /// Target-encoder Polyak rate.
    pub tau: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            filters: 32,
            z_dim: 50,
            tau: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub lr: f64,
    pub target_freq: u64,
    pub tau: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            target_freq: 2,
            tau: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorConfig {
    pub lr: f64,
    pub freq: u64,
    pub log_std: [f64; 2],
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            freq: 2,
            log_std: [-10.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaConfig {
    pub lr: f64,
    pub init: f64,
    pub beta1: f64,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            init: 0.1,
            beta1: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrlSection {
    pub head: SrlHead,
    pub lr: f64,
    pub decoder_freq: u64,
    pub lambda_z: f64,
    pub lambda_theta: f64,
    pub tau_key: f64,
}

impl Default for SrlSection {
    fn default() -> Self {
        let d = SrlConfig::default();
        Self {
            head: d.head,
            lr: d.lr,
            decoder_freq: 1,
            lambda_z: d.lambda_z,
            lambda_theta: d.lambda_theta,
            tau_key: d.tau_key,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedingConfig {
    pub steps: u64,
}

impl Default for SeedingConfig {
    fn default() -> Self {
        Self { steps: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Interactions between evaluations.
    pub interval: u64,
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 10_000,
            episodes: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    None,
    Random,
    Cure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub steps: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::None,
            steps: 20_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// Save after every this many finished episodes; 0 disables.
    pub every: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    /// Record elapsed seconds; off keeps metrics byte-reproducible.
    pub wall_clock: bool,
}

/// Every hyperparameter and mode switch of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskName,
    pub seed: u64,
    /// Total agent interactions.
    pub steps: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub hidden_dim: usize,
    pub frames: usize,
    pub env: EnvConfig,
    pub replay: ReplayConfig,
    pub encoder: EncoderConfig,
    pub critic: CriticConfig,
    pub actor: ActorConfig,
    pub alpha: AlphaConfig,
    pub srl: SrlSection,
    pub cure: CuriosityConfig,
    pub seeding: SeedingConfig,
    pub eval: EvalConfig,
    pub pretrain: PretrainConfig,
    pub checkpoint: CheckpointConfig,
    pub log: LogConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskName::ReacherHard,
            seed: 0,
            steps: 150_000,
            batch_size: 128,
            gamma: 0.99,
            hidden_dim: 1024,
            frames: 3,
            env: EnvConfig::default(),
            replay: ReplayConfig::default(),
            encoder: EncoderConfig::default(),
            critic: CriticConfig::default(),
            actor: ActorConfig::default(),
            alpha: AlphaConfig::default(),
            srl: SrlSection::default(),
            cure: CuriosityConfig::default(),
            seeding: SeedingConfig::default(),
            eval: EvalConfig::default(),
            pretrain: PretrainConfig::default(),
            checkpoint: CheckpointConfig::default(),
            log: LogConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml_string()).expect("config round-trips");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut cur = &mut table;
            for p in &parts[..parts.len() - 1] {
                let entry = cur
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                cur = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
            }
            cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.interval == 0 {
            return Err(Error::Config("eval.interval must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.srl.head == SrlHead::Contrastive && self.batch_size < 2 {
            return Err(Error::Config("contrastive head needs batch_size >= 2".into()));
        }
        if self.srl.decoder_freq == 0 {
            return Err(Error::Config("srl.decoder_freq must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.encoder.tau) {
            return Err(Error::Config("encoder.tau outside [0, 1]".into()));
        }
        if self.crop() > self.env.render_size {
            return Err(Error::Config(format!(
                "crop {} exceeds render size {}",
                self.crop(),
                self.env.render_size
            )));
        }
        self.cure.validate()?;
        self.sac_config().validate()?;
        self.encoder_spec()?;
        Ok(())
    }

    pub fn crop(&self) -> usize {
        self.env
            .crop
            .unwrap_or_else(|| self.env.render_size.saturating_sub(4))
    }

    pub fn env_overrides(&self) -> SpecOverrides {
        SpecOverrides {
            render_size: Some(self.env.render_size),
            frames: Some(self.frames),
            action_repeat: self.env.action_repeat,
            horizon: Some(self.env.horizon),
        }
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        EncoderSpec::new(self.frames, self.crop(), self.encoder.filters, self.encoder.z_dim)
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            hidden_dim: self.hidden_dim,
            actor_lr: self.actor.lr,
            critic_lr: self.critic.lr,
            alpha_lr: self.alpha.lr,
            alpha_beta1: self.alpha.beta1,
            init_temperature: self.alpha.init,
            tau: self.critic.tau,
            actor_update_freq: self.actor.freq,
            target_update_freq: self.critic.target_freq,
            log_std_min: self.actor.log_std[0],
            log_std_max: self.actor.log_std[1],
        }
    }

    pub fn srl_config(&self) -> SrlConfig {
        SrlConfig {
            head: self.srl.head,
            lambda_z: self.srl.lambda_z,
            lambda_theta: self.srl.lambda_theta,
            lr: self.srl.lr,
            tau_key: self.srl.tau_key,
        }
    }

    /// SHA-256 over everything that shapes the learned state; run length,
    /// checkpoint cadence and logging switches are excluded.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint = CheckpointConfig::default();
        c.log = LogConfig::default();
        c.eval = EvalConfig::default();
        let digest = Sha256::digest(c.to_toml_string().as_bytes());
        digest.into()
    }
}
