//! Ring-buffer replay store with uniform sampling and crop augmentation.

use cure_autodiff::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{pixel_value, Observation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_obs: Observation,
    pub done: bool,
}

/// How observations are cropped when a batch is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    /// Center crop for observations and next observations.
    Center,
    /// Independent random crops for observations and next observations,
    /// plus a second random crop of each observation as its positive.
    RandomWithPositive,
}

/// `B` sampled transitions with observations cropped to `S × C × C`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Tensor<f32>,
    pub next_obs: Tensor<f32>,
    pub positives: Option<Tensor<f32>>,
    /// `B × d`.
    pub actions: Tensor<f32>,
    pub rewards: Vec<f32>,
    /// `1 − done` per transition.
    pub not_done: Vec<f32>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_shape: Option<[usize; 3]>,
    action_dim: Option<usize>,
    cursor: usize,
    obs: Vec<u8>,
    next_obs: Vec<u8>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    dones: Vec<bool>,
}

impl ReplayBuffer {
    /// Storage grows with the fill count up to `capacity`.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Replay("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            obs_shape: None,
            action_dim: None,
            cursor: 0,
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity
    }

    pub fn obs_shape(&self) -> Option<[usize; 3]> {
        self.obs_shape
    }

    fn obs_len(&self) -> usize {
        self.obs_shape.map_or(0, |s| s.iter().product())
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        let shape = t.obs.shape();
        if t.next_obs.shape() != shape {
            return Err(Error::Shape {
                what: "next observation",
                expected: shape.to_vec(),
                got: t.next_obs.shape().to_vec(),
            });
        }
        match self.obs_shape {
            Some(s) if s != shape => {
                return Err(Error::Shape {
                    what: "replay observation",
                    expected: s.to_vec(),
                    got: shape.to_vec(),
                })
            }
            _ => {}
        }
        match self.action_dim {
            Some(d) if d != t.action.len() => {
                return Err(Error::Shape {
                    what: "replay action",
                    expected: vec![d],
                    got: vec![t.action.len()],
                })
            }
            _ => {}
        }
        if !t.reward.is_finite() {
            return Err(Error::NonFinite {
                what: "replay reward".into(),
            });
        }
        if t.action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                what: "replay action".into(),
            });
        }
        self.obs_shape = Some(shape);
        self.action_dim = Some(t.action.len());
        let n = self.obs_len();
        let d = t.action.len();
        if self.len() < self.capacity {
            self.obs.extend_from_slice(t.obs.pixels());
            self.next_obs.extend_from_slice(t.next_obs.pixels());
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.dones.push(t.done);
        } else {
            let i = self.cursor;
            self.obs[i * n..(i + 1) * n].copy_from_slice(t.obs.pixels());
            self.next_obs[i * n..(i + 1) * n].copy_from_slice(t.next_obs.pixels());
            self.actions[i * d..(i + 1) * d].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.dones[i] = t.done;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Transition stored in slot `i`.
    pub fn get(&self, i: usize) -> Result<Transition> {
        if i >= self.len() {
            return Err(Error::Replay(format!(
                "slot {i} out of range for {} stored transitions",
                self.len()
            )));
        }
        let [s, h, _] = self.obs_shape.expect("non-empty buffer has a shape");
        let n = self.obs_len();
        let d = self.action_dim.unwrap_or(0);
        Ok(Transition {
            obs: Observation::from_pixels(s, h, self.obs[i * n..(i + 1) * n].to_vec())?,
            action: self.actions[i * d..(i + 1) * d].to_vec(),
            reward: self.rewards[i],
            next_obs: Observation::from_pixels(s, h, self.next_obs[i * n..(i + 1) * n].to_vec())?,
            done: self.dones[i],
        })
    }

    /// Compact little-endian encoding used by checkpoints.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 2 * self.obs.len() + 9 * self.rewards.len());
        let mut put = |v: u64| out.extend_from_slice(&v.to_le_bytes());
        put(self.capacity as u64);
        let [s, h, w] = self.obs_shape.unwrap_or([0; 3]);
        put(s as u64);
        put(h as u64);
        put(w as u64);
        put(self.action_dim.map_or(u64::MAX, |d| d as u64));
        put(self.cursor as u64);
        put(self.rewards.len() as u64);
        out.extend_from_slice(&self.obs);
        out.extend_from_slice(&self.next_obs);
        for a in &self.actions {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for r in &self.rewards {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out.extend(self.dones.iter().map(|&d| d as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Replay(format!("corrupt replay encoding: {what}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let slice = &bytes[pos..end];
            pos = end;
            Ok(slice)
        };
        let mut header = [0u64; 7];
        for v in header.iter_mut() {
            *v = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        let [cap, s, h, w, d, cursor, len] = header.map(|v| v as usize);
        let mut buf = Self::new(cap)?;
        if len > cap || (len > 0 && cursor >= cap) {
            return Err(bad("fill count"));
        }
        if len > 0 {
            if s == 0 || h == 0 || h != w || header[4] == u64::MAX {
                return Err(bad("shape"));
            }
            buf.obs_shape = Some([s, h, w]);
            buf.action_dim = Some(d);
        }
        let n = s.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| bad("shape"))?;
        let total = n.checked_mul(len).ok_or_else(|| bad("shape"))?;
        buf.cursor = cursor;
        buf.obs = take(total)?.to_vec();
        buf.next_obs = take(total)?.to_vec();
        let floats = |raw: &[u8]| -> Vec<f32> {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        buf.actions = floats(take(4 * d * len)?);
        buf.rewards = floats(take(4 * len)?);
        buf.dones = take(len)?.iter().map(|&b| b != 0).collect();
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(buf)
    }

    /// Slots in insertion order, oldest first.
    pub fn chronological(&self) -> Vec<usize> {
        if self.is_full() {
            (0..self.capacity)
                .map(|k| (self.cursor + k) % self.capacity)
                .collect()
        } else {
            (0..self.len()).collect()
        }
    }

    /// `b` slots drawn uniformly with replacement from the filled region.
    pub fn sample_indices<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<usize>> {
        if b == 0 {
            return Err(Error::Replay("batch size must be positive".into()));
        }
        if self.len() < b {
            return Err(Error::Replay(format!(
                "cannot sample {b} transitions from {} stored",
                self.len()
            )));
        }
        Ok((0..b).map(|_| rng.random_range(0..self.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        b: usize,
        crop: usize,
        augment: Augment,
        rng: &mut R,
    ) -> Result<Batch> {
        let indices = self.sample_indices(b, rng)?;
        self.gather(indices, crop, augment, rng)
    }

    /// Assembles a batch from explicit slots.
    pub fn gather<R: Rng + ?Sized>(
        &self,
        indices: Vec<usize>,
        crop: usize,
        augment: Augment,
        rng: &mut R,
    ) -> Result<Batch> {
        let shape = self
            .obs_shape
            .ok_or_else(|| Error::Replay("buffer is empty".into()))?;
        let [s, h, _] = shape;
        if crop > h || crop == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop size {crop} must be in 1..={h}"
            )));
        }
        let b = indices.len();
        let n = self.obs_len();
        let d = self.action_dim.unwrap_or(0);
        let out_len = s * crop * crop;
        let mut obs = Vec::with_capacity(b * out_len);
        let mut next = Vec::with_capacity(b * out_len);
        let mut pos = match augment {
            Augment::Center => None,
            Augment::RandomWithPositive => Some(Vec::with_capacity(b * out_len)),
        };
        let center = ((h - crop) / 2, (h - crop) / 2);
        let mut actions = Vec::with_capacity(b * d);
        let mut rewards = Vec::with_capacity(b);
        let mut not_done = Vec::with_capacity(b);
        for &i in &indices {
            if i >= self.len() {
                return Err(Error::Replay(format!("slot {i} is not filled")));
            }
            let o = &self.obs[i * n..(i + 1) * n];
            let no = &self.next_obs[i * n..(i + 1) * n];
            match pos.as_mut() {
                None => {
                    extend_values(&mut obs, &crop_at(o, shape, crop, center)?);
                    extend_values(&mut next, &crop_at(no, shape, crop, center)?);
                }
                Some(p) => {
                    extend_values(&mut obs, &random_crop(o, shape, crop, rng)?);
                    extend_values(&mut next, &random_crop(no, shape, crop, rng)?);
                    extend_values(p, &random_crop(o, shape, crop, rng)?);
                }
            }
            actions.extend_from_slice(&self.actions[i * d..(i + 1) * d]);
            rewards.push(self.rewards[i]);
            not_done.push(if self.dones[i] { 0.0 } else { 1.0 });
        }
        let dims = [b, s, crop, crop];
        Ok(Batch {
            obs: Tensor::new(&dims, obs)?,
            next_obs: Tensor::new(&dims, next)?,
            positives: pos.map(|p| Tensor::new(&dims, p)).transpose()?,
            actions: Tensor::new(&[b, d.max(1)], if d == 0 { vec![0.0; b] } else { actions })?,
            rewards,
            not_done,
            indices,
        })
    }
}

fn extend_values(out: &mut Vec<f32>, pixels: &[u8]) {
    out.extend(pixels.iter().map(|&p| pixel_value(p)));
}

/// Copies the `C × C` window at `offset` (row, col) from every frame.
pub fn crop_at(obs: &[u8], shape: [usize; 3], crop: usize, offset: (usize, usize)) -> Result<Vec<u8>> {
    let [s, h, w] = shape;
    if obs.len() != s * h * w {
        return Err(Error::Shape {
            what: "crop input",
            expected: shape.to_vec(),
            got: vec![obs.len()],
        });
    }
    if crop > h || crop > w {
        return Err(Error::InvalidArgument(format!(
            "crop size {crop} exceeds frame size {h}×{w}"
        )));
    }
    if offset.0 + crop > h || offset.1 + crop > w {
        return Err(Error::InvalidArgument(format!(
            "crop offset {offset:?} out of range"
        )));
    }
    let mut out = Vec::with_capacity(s * crop * crop);
    for f in 0..s {
        for r in 0..crop {
            let start = f * h * w + (offset.0 + r) * w + offset.1;
            out.extend_from_slice(&obs[start..start + crop]);
        }
    }
    Ok(out)
}

/// Crop at an offset drawn uniformly from `[0, H − C]²`, shared by all frames.
pub fn random_crop<R: Rng + ?Sized>(
    obs: &[u8],
    shape: [usize; 3],
    crop: usize,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let [_, h, w] = shape;
    if crop > h || crop > w {
        return Err(Error::InvalidArgument(format!(
            "crop size {crop} exceeds frame size {h}×{w}"
        )));
    }
    let oy = rng.random_range(0..=h - crop);
    let ox = rng.random_range(0..=w - crop);
    crop_at(obs, shape, crop, (oy, ox))
}

/// Center crop of a single observation as a `1 × S × C × C` tensor.
pub fn center_crop_tensor(obs: &Observation, crop: usize) -> Result<Tensor<f32>> {
    let shape = obs.shape();
    let [s, h, _] = shape;
    if crop > h {
        return Err(Error::InvalidArgument(format!(
            "crop size {crop} exceeds frame size {h}"
        )));
    }
    let off = (h - crop) / 2;
    let px = crop_at(obs.pixels(), shape, crop, (off, off))?;
    Ok(Tensor::new(
        &[1, s, crop, crop],
        px.iter().map(|&p| pixel_value(p)).collect(),
    )?)
}
