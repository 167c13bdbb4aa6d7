use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cure_core::harness::config::ExperimentConfig;
use cure_core::harness::train::{RunMode, Trainer, CHECKPOINT_FILE, EVAL_CSV};
use cure_core::harness::{checkpoint, gradsuite, plot, pretrain, visitation};

#[derive(Parser)]
#[command(name = "cure", version, about = "Pixel-based SAC with representation learning and curiosity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    /// Dotted override, e.g. `--set cure.p_c=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(t) = &self.task {
            overrides.push(format!("task=\"{t}\""));
        }
        if let Some(s) = self.steps {
            overrides.push(format!("steps={s}"));
        }
        Ok(base.with_overrides(&overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, with pretraining first if the config asks for it.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoint.bin`.
        #[arg(long)]
        resume: bool,
    },
    /// Curiosity-only run for `--steps` interactions.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train cure-only and task-only runs, then score their visitation.
    Visitation {
        #[command(flatten)]
        common: Common,
        /// Score existing checkpoints instead of training.
        #[arg(long, num_args = 2, value_names = ["CURIOUS", "TASK"])]
        checkpoints: Option<Vec<PathBuf>>,
    },
    /// Mean and min/max band over seeds from evaluation CSVs.
    Plot {
        /// `label=dir1,dir2,...`; each dir holds an eval.csv. Repeatable.
        #[arg(long = "curve", required = true)]
        curves: Vec<String>,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long, default_value = "curves.svg")]
        out: PathBuf,
    },
    /// Finite-difference check of every op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write_config(config: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), config.to_toml_string())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Train { common, resume } => {
            let config = common.config()?;
            write_config(&config, &common.out)?;
            let t = if resume {
                let path = common.out.join(CHECKPOINT_FILE);
                let mut t = checkpoint::restore(config, &path, Some(&common.out))
                    .with_context(|| format!("resuming from {}", path.display()))?;
                t.run()?;
                t
            } else {
                pretrain::train_with_pretraining(config, Some(&common.out))?
            };
            println!(
                "finished {} steps, {} episodes, last eval {}",
                t.step,
                t.episode,
                t.last_eval().map_or("n/a".into(), |v| format!("{v:.1}"))
            );
        }
        Command::Pretrain { common } => {
            let mut config = common.config()?;
            config.cure.enabled = true;
            config.cure.single_policy = false;
            write_config(&config, &common.out)?;
            let mut t = Trainer::new(config, RunMode::CureOnly, Some(&common.out))?;
            t.run()?;
            if t.at_boundary() {
                checkpoint::save(&t, &common.out.join(CHECKPOINT_FILE))?;
            }
            println!("finished {} curious steps", t.step);
        }
        Command::Visitation { common, checkpoints } => {
            let config = common.config()?;
            let rows = match checkpoints {
                Some(p) => {
                    let rows = visitation::score_from_checkpoints(&config, &p[0], &p[1], config.eval.episodes)?;
                    std::fs::create_dir_all(&common.out)?;
                    visitation::write_csv(&common.out.join("visitation.csv"), &rows)?;
                    rows
                }
                None => visitation::run_experiment(&config, &common.out)?,
            };
            println!("policy,observations,min,mean,max");
            for r in rows {
                println!("{},{},{:.6},{:.6},{:.6}", r.policy, r.observations, r.min, r.mean, r.max);
            }
        }
        Command::Plot { curves, title, out } => {
            let mut loaded = Vec::new();
            for spec in &curves {
                let Some((label, dirs)) = spec.split_once('=') else {
                    bail!("curve `{spec}` is not label=dir,dir,...");
                };
                let paths: Vec<PathBuf> = dirs.split(',').map(|d| Path::new(d).join(EVAL_CSV)).collect();
                let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
                loaded.push(plot::load_curve(label, &refs)?);
            }
            plot::write_svg(&out, &title, &loaded)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { seed } => {
            let mut failed = 0;
            for c in gradsuite::run(seed)? {
                let ok = c.passed();
                failed += usize::from(!ok);
                println!("{:<20} {:.3e} {}", c.name, c.max_rel_error, if ok { "ok" } else { "FAIL" });
            }
            if failed > 0 {
                bail!("{failed} gradient checks exceeded {:e}", gradsuite::TOLERANCE);
            }
        }
    }
    Ok(())
}
