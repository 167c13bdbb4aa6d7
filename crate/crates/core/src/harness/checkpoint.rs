//! Binary checkpoints taken at episode boundaries.
//!
//! Layout: magic, format version, config hash, record count, records, then a
//! SHA-256 of everything before it. A record is a name plus either an f32
//! tensor (shape then little-endian values), a byte blob or a u64.

use std::collections::BTreeMap;
use std::path::Path;

use cure_autodiff::{Adam, ParamSet, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::rng::RngState;
use crate::sac::SacAgent;

use super::config::ExperimentConfig;
use super::metrics::{Mean, MetricsWriter};
use super::train::{RunMode, Trainer, EVAL_CSV, TRAIN_CSV};

pub const MAGIC: &[u8; 8] = b"CURECKPT";
pub const VERSION: u32 = 1;

const TAG_TENSOR: u8 = 0;
const TAG_BYTES: u8 = 1;
const TAG_U64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Tensor(Tensor<f32>),
    Bytes(Vec<u8>),
    U64(u64),
}

/// Parsed and verified checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub records: BTreeMap<String, Record>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    fn new(config_hash: [u8; 32]) -> Self {
        Self {
            config_hash,
            records: BTreeMap::new(),
        }
    }

    fn put(&mut self, name: impl Into<String>, r: Record) {
        self.records.insert(name.into(), r);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (name, rec) in &self.records {
            let tag = match rec {
                Record::Tensor(_) => TAG_TENSOR,
                Record::Bytes(_) => TAG_BYTES,
                Record::U64(_) => TAG_U64,
            };
            out.push(tag);
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match rec {
                Record::Tensor(t) => {
                    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Bytes(b) => {
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
                Record::U64(v) => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 8 + 32 {
            return Err(ck("file is truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(ck("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ck("checksum mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ck(format!("format version {version}, expected {VERSION}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut cp = Self::new(config_hash);
        let n = r.u64()?;
        for _ in 0..n {
            let tag = r.take(1)?[0];
            let len = r.len()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ck("record name is not UTF-8"))?
                .to_string();
            let rec = match tag {
                TAG_TENSOR => {
                    let rank = r.len()?;
                    let mut shape = Vec::with_capacity(rank.min(8));
                    for _ in 0..rank {
                        shape.push(r.len()?);
                    }
                    let numel = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .ok_or_else(|| ck("tensor too large"))?;
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| ck("tensor too large"))?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Record::Tensor(Tensor::new(&shape, data)?)
                }
                TAG_BYTES => {
                    let len = r.len()?;
                    Record::Bytes(r.take(len)?.to_vec())
                }
                TAG_U64 => Record::U64(r.u64()?),
                t => return Err(ck(format!("unknown record tag {t}"))),
            };
            if cp.records.insert(name.clone(), rec).is_some() {
                return Err(ck(format!("duplicate record `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(ck("trailing bytes after records"));
        }
        Ok(cp)
    }

    fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .get(name)
            .ok_or_else(|| ck(format!("missing record `{name}`")))
    }

    fn u64(&self, name: &str) -> Result<u64> {
        match self.get(name)? {
            Record::U64(v) => Ok(*v),
            _ => Err(ck(format!("record `{name}` is not an integer"))),
        }
    }

    fn f64(&self, name: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(name)?))
    }

    fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Record::Bytes(b) => Ok(b),
            _ => Err(ck(format!("record `{name}` is not a blob"))),
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name)? {
            Record::Tensor(t) => Ok(t),
            _ => Err(ck(format!("record `{name}` is not a tensor"))),
        }
    }

    fn put_params(&mut self, prefix: &str, p: &ParamSet<f32>) {
        for (name, t) in p.iter() {
            self.put(format!("{prefix}/{name}"), Record::Tensor(t.clone()));
        }
    }

    fn load_params(&self, prefix: &str, p: &mut ParamSet<f32>) -> Result<()> {
        for i in 0..p.len() {
            let name = format!("{prefix}/{}", p.name(i));
            let t = self.tensor(&name)?;
            if t.shape() != p.get(i).shape() {
                return Err(ck(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.get(i).shape()
                )));
            }
            *p.get_mut(i) = t.clone();
        }
        Ok(())
    }

    fn put_adam(&mut self, prefix: &str, opt: &Adam<f32>) {
        let (m, v) = opt.moments();
        self.put(format!("{prefix}/t"), Record::U64(opt.steps()));
        self.put(format!("{prefix}/slots"), Record::U64(m.len() as u64));
        for (i, (m, v)) in m.iter().zip(v).enumerate() {
            self.put(format!("{prefix}/m{i}"), Record::Tensor(m.clone()));
            self.put(format!("{prefix}/v{i}"), Record::Tensor(v.clone()));
        }
    }

    fn load_adam(&self, prefix: &str, opt: &mut Adam<f32>) -> Result<()> {
        let t = self.u64(&format!("{prefix}/t"))?;
        let slots = self.u64(&format!("{prefix}/slots"))? as usize;
        let mut m = Vec::with_capacity(slots);
        let mut v = Vec::with_capacity(slots);
        for i in 0..slots {
            m.push(self.tensor(&format!("{prefix}/m{i}"))?.clone());
            v.push(self.tensor(&format!("{prefix}/v{i}"))?.clone());
        }
        opt.restore(t, m, v)?;
        Ok(())
    }

    fn put_agent(&mut self, prefix: &str, a: &SacAgent) {
        self.put_params(&format!("{prefix}/actor"), &a.actor);
        self.put_params(&format!("{prefix}/critic"), &a.critic);
        self.put_params(&format!("{prefix}/critic_target"), &a.critic_target);
        self.put_params(&format!("{prefix}/log_alpha"), &a.log_alpha);
        self.put_adam(&format!("{prefix}/opt/actor"), &a.actor_opt);
        self.put_adam(&format!("{prefix}/opt/critic"), &a.critic_opt);
        self.put_adam(&format!("{prefix}/opt/alpha"), &a.alpha_opt);
        self.put(format!("{prefix}/skipped"), Record::U64(a.skipped_updates));
    }

    fn load_agent(&self, prefix: &str, a: &mut SacAgent) -> Result<()> {
        self.load_params(&format!("{prefix}/actor"), &mut a.actor)?;
        self.load_params(&format!("{prefix}/critic"), &mut a.critic)?;
        self.load_params(&format!("{prefix}/critic_target"), &mut a.critic_target)?;
        self.load_params(&format!("{prefix}/log_alpha"), &mut a.log_alpha)?;
        self.load_adam(&format!("{prefix}/opt/actor"), &mut a.actor_opt)?;
        self.load_adam(&format!("{prefix}/opt/critic"), &mut a.critic_opt)?;
        self.load_adam(&format!("{prefix}/opt/alpha"), &mut a.alpha_opt)?;
        a.skipped_updates = self.u64(&format!("{prefix}/skipped"))?;
        Ok(())
    }

    fn put_rng(&mut self, name: &str, s: &RngState) {
        let mut b = Vec::with_capacity(56);
        b.extend_from_slice(&s.seed);
        b.extend_from_slice(&s.stream.to_le_bytes());
        b.extend_from_slice(&s.word_pos.to_le_bytes());
        self.put(format!("rng/{name}"), Record::Bytes(b));
    }

    fn rng(&self, name: &str) -> Result<RngState> {
        let b = self.bytes(&format!("rng/{name}"))?;
        if b.len() != 56 {
            return Err(ck(format!("rng `{name}` has {} bytes", b.len())));
        }
        Ok(RngState {
            seed: b[..32].try_into().expect("32 bytes"),
            stream: u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")),
            word_pos: u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")),
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ck("record runs past the end of the file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| ck("length overflows"))
    }
}

fn mode_code(m: RunMode) -> u64 {
    match m {
        RunMode::Full => 0,
        RunMode::CureOnly => 1,
        RunMode::RandomSrl => 2,
    }
}

/// Snapshot of a trainer sitting at an episode boundary.
pub fn capture(t: &Trainer) -> Result<Checkpoint> {
    if !t.at_boundary() {
        return Err(ck("checkpoints are only taken between episodes"));
    }
    let mut cp = Checkpoint::new(t.config.hash());
    let l = &t.learner;
    cp.put("mode", Record::U64(mode_code(t.mode)));
    cp.put("step", Record::U64(t.step));
    cp.put("episode", Record::U64(t.episode));
    cp.put("evaluations", Record::U64(t.evaluations));
    cp.put_params("encoder", &l.encoder);
    cp.put_params("target_encoder", &l.target_encoder);
    cp.put_params("srl/head", &l.srl.head);
    if let Some(k) = &l.srl.key_encoder {
        cp.put_params("srl/key", k);
    }
    cp.put_adam("srl/opt", &l.srl.optimizer);
    cp.put("srl/skipped", Record::U64(l.srl.skipped_steps));
    cp.put_agent("task", &l.task);
    if let Some(c) = &l.curious {
        cp.put_agent("curious", c);
    }
    cp.put("replay", Record::Bytes(t.replay.to_bytes()));
    cp.put_rng("env", &t.env.rng_state());
    cp.put_rng("eval_env", &t.eval_env.rng_state());
    for (name, rng) in t.rngs.named() {
        cp.put_rng(name, &RngState::capture(rng));
    }
    let mut accum = t.accum;
    for (name, m) in accum.named_mut() {
        let (sum, n) = m.parts();
        cp.put(format!("accum/{name}/sum"), Record::U64(sum.to_bits()));
        cp.put(format!("accum/{name}/n"), Record::U64(n));
    }
    cp.put("counts/task", Record::U64(t.counts.task));
    cp.put("counts/curious", Record::U64(t.counts.curious));
    cp.put("counts/random", Record::U64(t.counts.random));
    Ok(cp)
}

/// Writes a checkpoint atomically (temp file then rename).
pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    let bytes = capture(t)?.to_bytes();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads and verifies a checkpoint file without applying it.
pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| ck(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Rebuilds a trainer from `path`. Nothing is written until the checkpoint
/// has been fully validated; with `out`, the metric files there are trimmed
/// to the checkpoint step and reopened for appending.
pub fn restore(config: ExperimentConfig, path: &Path, out: Option<&Path>) -> Result<Trainer> {
    let cp = read(path)?;
    if cp.config_hash != config.hash() {
        return Err(ck("checkpoint was written under a different configuration"));
    }
    let mode = match cp.u64("mode")? {
        0 => RunMode::Full,
        1 => RunMode::CureOnly,
        2 => RunMode::RandomSrl,
        m => return Err(ck(format!("unknown run mode {m}"))),
    };
    let mut t = Trainer::new(config, mode, None)?;
    apply(&cp, &mut t)?;
    if let Some(dir) = out {
        let step = t.step;
        let train = MetricsWriter::resume(&dir.join(TRAIN_CSV), step)?;
        let eval = MetricsWriter::resume(&dir.join(EVAL_CSV), step)?;
        t.outputs = Some(super::train::Outputs {
            dir: dir.to_path_buf(),
            train,
            eval,
        });
    }
    Ok(t)
}

fn apply(cp: &Checkpoint, t: &mut Trainer) -> Result<()> {
    t.step = cp.u64("step")?;
    t.episode = cp.u64("episode")?;
    t.evaluations = cp.u64("evaluations")?;
    let l = &mut t.learner;
    cp.load_params("encoder", &mut l.encoder)?;
    cp.load_params("target_encoder", &mut l.target_encoder)?;
    cp.load_params("srl/head", &mut l.srl.head)?;
    if let Some(k) = &mut l.srl.key_encoder {
        cp.load_params("srl/key", k)?;
    }
    cp.load_adam("srl/opt", &mut l.srl.optimizer)?;
    l.srl.skipped_steps = cp.u64("srl/skipped")?;
    cp.load_agent("task", &mut l.task)?;
    if let Some(c) = &mut l.curious {
        cp.load_agent("curious", c)?;
    }
    t.replay = ReplayBuffer::from_bytes(cp.bytes("replay")?)?;
    if t.replay.capacity() != t.config.replay.capacity {
        return Err(ck("replay capacity differs from the config"));
    }
    t.env.set_rng_state(&cp.rng("env")?);
    t.eval_env.set_rng_state(&cp.rng("eval_env")?);
    for (name, rng) in t.rngs.named_mut() {
        *rng = cp.rng(name)?.restore();
    }
    for (name, m) in t.accum.named_mut() {
        let sum = cp.f64(&format!("accum/{name}/sum"))?;
        let n = cp.u64(&format!("accum/{name}/n"))?;
        *m = Mean::from_parts(sum, n);
    }
    t.counts.task = cp.u64("counts/task")?;
    t.counts.curious = cp.u64("counts/curious")?;
    t.counts.random = cp.u64("counts/random")?;
    Ok(())
}
