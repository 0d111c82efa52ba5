use std::io;

use crate::guidescript::DslError;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape { op: &'static str, expected: String, got: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("diffusion step {step} out of range 1..={n}")]
    StepOutOfRange { step: usize, n: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("guidance diverged: term `{term}` produced a non-finite gradient")]
    GuidanceDivergence { term: String },

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDivergence { step: usize, loss: f64 },

    #[error("expert failed to reach the goal on episode {episode} (seed {seed})")]
    ExpertFailure { episode: usize, seed: u64 },

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Dsl(#[from] DslError),

    #[error("LLM transport error: {0}")]
    Transport(String),

    #[error("guidance generation exhausted after {} rounds; last error: {}", diagnostics.len(), diagnostics.last().map(String::as_str).unwrap_or("none"))]
    Exhausted { diagnostics: Vec<String> },

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
