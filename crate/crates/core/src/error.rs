use cure_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("unknown task `{name}`; valid tasks: {}", valid.join(", "))]
    UnknownTask { name: String, valid: Vec<&'static str> },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("replay: {0}")]
    Replay(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("step {step}, phase {phase}: {source}")]
    Training {
        step: u64,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
