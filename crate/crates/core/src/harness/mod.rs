//! Experiment orchestration: configuration, training loop, checkpoints,
//! metrics, pretraining, visitation scoring, plotting and gradient checks.

pub mod checkpoint;
pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod plot;
pub mod pretrain;
pub mod train;
pub mod visitation;

pub use config::{ExperimentConfig, PretrainMode};
pub use metrics::{read_rows, MetricsRow, MetricsWriter, HEADER};
pub use train::{run_cure_only, train, Learner, Phase, RunMode, Trainer};
