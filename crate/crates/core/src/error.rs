use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("failed to write {path}: {reason}")]
    Write { path: PathBuf, reason: String },

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("incompatible container version {found} (expected {expected})")]
    Incompatible { found: u32, expected: u32 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("initialization error: {0}")]
    Initialization(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("network spec error: {0}")]
    Spec(String),

    #[error("non-finite activations after layer `{layer}`")]
    Numeric { layer: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Training { step: usize, loss: f64 },

    #[error("degenerate trajectory: expert snapshots {start} and {target} coincide")]
    DegenerateTrajectory { start: usize, target: usize },

    #[error("distillation aborted at iteration {iteration}: {reason}")]
    Distill { iteration: usize, reason: String },

    #[error("distillation run {run} failed: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation failed for (run, model) pairs {failed:?}")]
    PartialReport { failed: Vec<(usize, usize)> },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
