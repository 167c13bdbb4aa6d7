//! Shared convolutional encoder and the two representation-learning heads.

mod nets;

use cure_autodiff::{Adam, AdamConfig, ParamSet, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::Batch;

pub use nets::{fan_in_uniform, EncoderSpec, STRIDES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrlHead {
    Rae,
    Contrastive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrlConfig {
    pub head: SrlHead,
    pub lambda_z: f64,
    pub lambda_theta: f64,
    pub lr: f64,
    /// Key-encoder momentum.
    pub tau_key: f64,
}

impl Default for SrlConfig {
    fn default() -> Self {
        Self {
            head: SrlHead::Rae,
            lambda_z: 1e-6,
            lambda_theta: 1e-7,
            lr: 1e-3,
            tau_key: 0.05,
        }
    }
}

/// Inputs consumed by the active head.
#[derive(Clone, Copy, Debug)]
pub enum SrlInput<'a> {
    Rae {
        obs: &'a Tensor<f32>,
    },
    Contrastive {
        anchor: &'a Tensor<f32>,
        positive: &'a Tensor<f32>,
    },
}

impl<'a> SrlInput<'a> {
    pub fn from_batch(head: SrlHead, batch: &'a Batch) -> Result<Self> {
        match head {
            SrlHead::Rae => Ok(SrlInput::Rae { obs: &batch.obs }),
            SrlHead::Contrastive => {
                let positive = batch.positives.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("contrastive head needs positive crops".into())
                })?;
                Ok(SrlInput::Contrastive {
                    anchor: &batch.obs,
                    positive,
                })
            }
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            SrlInput::Rae { obs } => obs.shape()[0],
            SrlInput::Contrastive { anchor, .. } => anchor.shape()[0],
        }
    }
}

/// Regularized autoencoder loss on `obs[B, S, C, C]`.
///
/// Returns `(loss[1], per_sample[B])`; the per-sample term is pixel MSE plus
/// `λ_z‖z‖²`, and the loss adds `λ_θ‖θ‖²` over the decoder.
#[allow(clippy::too_many_arguments)]
pub fn rae_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &EncoderSpec,
    enc: &[Var],
    dec: &[Var],
    obs: Var,
    lambda_z: T,
    lambda_theta: T,
) -> Result<(Var, Var)> {
    let z = spec.encode(tape, enc, obs)?;
    rae_loss_from_latent(tape, spec, z, dec, obs, lambda_z, lambda_theta)
}

pub fn rae_loss_from_latent<T: Real>(
    tape: &mut Tape<T>,
    spec: &EncoderSpec,
    z: Var,
    dec: &[Var],
    obs: Var,
    lambda_z: T,
    lambda_theta: T,
) -> Result<(Var, Var)> {
    let b = tape.shape(obs)[0];
    let recon = spec.decode(tape, dec, z)?;
    if tape.shape(recon) != tape.shape(obs) {
        return Err(Error::Shape {
            what: "reconstruction",
            expected: tape.shape(obs).to_vec(),
            got: tape.shape(recon).to_vec(),
        });
    }
    let diff = tape.sub(recon, obs)?;
    let sq = tape.square(diff);
    let n = tape.value(obs).numel() / b;
    let sq = tape.reshape(sq, &[b, n])?;
    let mse = tape.mean(sq, Some(1))?;
    let z2 = tape.square(z);
    let z2 = tape.sum(z2, Some(1))?;
    let z2 = tape.affine(z2, lambda_z, T::zero());
    let per = tape.add(mse, z2)?;
    let mut loss = tape.mean_all(per);
    for &p in dec {
        let s = tape.square(p);
        let s = tape.sum_all(s);
        let s = tape.affine(s, lambda_theta, T::zero());
        loss = tape.add(loss, s)?;
    }
    Ok((loss, per))
}

/// Bilinear logits `q W kᵀ`, one row per anchor.
pub fn bilinear_logits<T: Real>(tape: &mut Tape<T>, q: Var, w: Var, k: Var) -> Result<Var> {
    let qw = tape.matmul(q, w)?;
    let kt = tape.transpose(k)?;
    Ok(tape.matmul(qw, kt)?)
}

/// InfoNCE with in-batch negatives. Keys come from `key` parameters, which
/// should be bound without gradients. Returns `(loss[1], per_sample[B])`.
pub fn infonce_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &EncoderSpec,
    enc: &[Var],
    key: &[Var],
    w: Var,
    anchor: Var,
    positive: Var,
) -> Result<(Var, Var)> {
    let b = tape.shape(anchor)[0];
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 samples, got {b}"
        )));
    }
    let q = spec.encode(tape, enc, anchor)?;
    let k = spec.encode(tape, key, positive)?;
    let k = tape.detach(k);
    let logits = bilinear_logits(tape, q, w, k)?;
    let targets: Vec<usize> = (0..b).collect();
    let per = tape.cross_entropy(logits, &targets)?;
    let loss = tape.mean_all(per);
    Ok((loss, per))
}

/// Outcome of one representation-learning step.
#[derive(Clone, Debug, PartialEq)]
pub struct SrlUpdate {
    /// Per-sample errors evaluated before the step.
    pub errors: Vec<f32>,
    pub loss: f32,
    /// False when the step was skipped for non-finite gradients.
    pub applied: bool,
}

/// Active head, its optimizer and (for the contrastive head) the key encoder.
#[derive(Clone, Debug)]
pub struct Srl {
    pub spec: EncoderSpec,
    pub config: SrlConfig,
    /// Decoder for the RAE head, `[W]` for the contrastive head.
    pub head: ParamSet<f32>,
    pub key_encoder: Option<ParamSet<f32>>,
    pub optimizer: Adam<f32>,
    pub skipped_steps: u64,
}

impl Srl {
    pub fn new<R: Rng + ?Sized>(
        spec: EncoderSpec,
        config: SrlConfig,
        encoder: &ParamSet<f32>,
        rng: &mut R,
    ) -> Result<Self> {
        if !(config.lambda_z >= 0.0 && config.lambda_theta >= 0.0) {
            return Err(Error::Config("SRL penalties must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&config.tau_key) {
            return Err(Error::Config("key momentum must lie in [0, 1]".into()));
        }
        let (head, key_encoder) = match config.head {
            SrlHead::Rae => (spec.init_decoder(rng), None),
            SrlHead::Contrastive => {
                let mut w = ParamSet::new();
                w.add("W", fan_in_uniform(&[spec.z_dim, spec.z_dim], spec.z_dim, rng));
                (w, Some(encoder.clone()))
            }
        };
        Ok(Self {
            spec,
            config,
            head,
            key_encoder,
            optimizer: Adam::new(AdamConfig::with_lr(config.lr)),
            skipped_steps: 0,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        enc: &[Var],
        head: &[Var],
        input: SrlInput<'_>,
    ) -> Result<(Var, Var)> {
        match (self.config.head, input) {
            (SrlHead::Rae, SrlInput::Rae { obs }) => {
                let x = tape.constant(obs.clone());
                rae_loss(
                    tape,
                    &self.spec,
                    enc,
                    head,
                    x,
                    self.config.lambda_z as f32,
                    self.config.lambda_theta as f32,
                )
            }
            (SrlHead::Contrastive, SrlInput::Contrastive { anchor, positive }) => {
                let key = self
                    .key_encoder
                    .as_ref()
                    .expect("contrastive head owns a key encoder")
                    .bind(tape, false);
                let a = tape.constant(anchor.clone());
                let p = tape.constant(positive.clone());
                infonce_loss(tape, &self.spec, enc, &key, head[0], a, p)
            }
            (head, _) => Err(Error::InvalidArgument(format!(
                "input does not match the {head:?} head"
            ))),
        }
    }

    /// Per-sample SRL error without touching any parameter.
    pub fn errors(&self, encoder: &ParamSet<f32>, input: SrlInput<'_>) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let enc = encoder.bind(&mut tape, false);
        let head = self.head.bind(&mut tape, false);
        let (_, per) = self.forward(&mut tape, &enc, &head, input)?;
        Ok(tape.value(per).data().to_vec())
    }

    /// One gradient step on encoder and head; returns pre-step errors.
    pub fn update(&mut self, encoder: &mut ParamSet<f32>, input: SrlInput<'_>) -> Result<SrlUpdate> {
        let mut tape = Tape::new();
        let enc = encoder.bind(&mut tape, true);
        let head = self.head.bind(&mut tape, true);
        let (loss, per) = self.forward(&mut tape, &enc, &head, input)?;
        let loss_value = tape.value(loss).item();
        let errors = tape.value(per).data().to_vec();
        if !loss_value.is_finite() || errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{:?} loss {loss_value}", self.config.head),
            });
        }
        let mut grads = tape.backward(loss)?;
        let g_enc = ParamSet::collect_grads(&enc, &mut grads);
        let g_head = ParamSet::collect_grads(&head, &mut grads);
        let applied = match self
            .optimizer
            .step(&mut [(encoder, &g_enc), (&mut self.head, &g_head)])
        {
            Ok(()) => true,
            Err(cure_autodiff::AutodiffError::NonFinite { what }) => {
                log::warn!("skipping SRL step: non-finite {what}");
                self.skipped_steps += 1;
                false
            }
            Err(e) => return Err(e.into()),
        };
        if applied {
            self.update_key(encoder)?;
        }
        Ok(SrlUpdate {
            errors,
            loss: loss_value,
            applied,
        })
    }

    /// Moves the key encoder toward `encoder` by `tau_key`.
    pub fn update_key(&mut self, encoder: &ParamSet<f32>) -> Result<()> {
        if let Some(key) = &mut self.key_encoder {
            key.polyak_toward(encoder, self.config.tau_key as f32)?;
        }
        Ok(())
    }
}

/// Convenience: encode a batch of observations without gradients.
pub fn encode_batch<T: Real>(spec: &EncoderSpec, encoder: &ParamSet<T>, obs: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape, false);
    let x = tape.constant(obs.clone());
    let z = spec.encode(&mut tape, &enc, x)?;
    Ok(tape.value(z).clone())
}
