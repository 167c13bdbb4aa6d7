use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 16] = [
    "step",
    "episode",
    "episode_reward",
    "critic_loss",
    "actor_loss",
    "alpha_loss",
    "alpha",
    "srl_loss",
    "cure_critic_loss",
    "cure_actor_loss",
    "cure_alpha_loss",
    "cure_alpha",
    "intrinsic_reward",
    "curious_fraction",
    "skipped_updates",
    "wall_clock",
];

/// One logged record. Loss columns are means since the previous row and are
/// empty when nothing was recorded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub episode_reward: f64,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub srl_loss: Option<f64>,
    pub cure_critic_loss: Option<f64>,
    pub cure_actor_loss: Option<f64>,
    pub cure_alpha_loss: Option<f64>,
    pub cure_alpha: Option<f64>,
    pub intrinsic_reward: Option<f64>,
    pub curious_fraction: f64,
    pub skipped_updates: u64,
    pub wall_clock: f64,
}

/// Running mean that resets when read.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    pub fn push_opt(&mut self, v: Option<f32>) {
        if let Some(v) = v {
            self.push(v as f64);
        }
    }

    pub fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Mean::default();
        out
    }

    pub fn parts(&self) -> (f64, u64) {
        (self.sum, self.n)
    }

    pub fn from_parts(sum: f64, n: u64) -> Self {
        Self { sum, n }
    }
}

/// Append-only CSV with strictly increasing steps.
pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Creates (or truncates) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = File::create(path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(HEADER).map_err(csv_err)?;
        writer.flush()?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            last_step: None,
        })
    }

    /// Reopens `path`, keeping only rows with `step <= keep_until`.
    pub fn resume(path: &Path, keep_until: u64) -> Result<Self> {
        let rows = if path.exists() {
            read_rows(path)?
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for r in rows.into_iter().filter(|r| r.step <= keep_until) {
            w.write(&r)?;
        }
        Ok(w)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(last) = self.last_step {
            if row.step <= last {
                return Err(Error::Metrics(format!(
                    "step {} does not follow {last} in {}",
                    row.step,
                    self.path.display()
                )));
            }
        }
        self.writer.serialize(row).map_err(csv_err)?;
        self.writer.flush()?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Metrics(e.to_string())
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(Error::Metrics(format!(
            "{}: line 1: unexpected header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<MetricsRow>().enumerate() {
        let row = rec.map_err(|e| {
            Error::Metrics(format!("{}: line {}: {e}", path.display(), i + 2))
        })?;
        rows.push(row);
    }
    Ok(rows)
}
