//! Client-side training: the tiny causal language model, AdamW, the
//! learning-rate schedule, clipping, and the per-round training loop.

mod adamw;
mod grad;
mod model;
pub mod ops;
mod schedule;
mod trainer;

pub use adamw::{AdamWConfig, AdamWState};
pub use grad::{clip_grad, GradAccumulator};
pub use model::{alibi_bias, alibi_slope, TinyLM, TinyLMConfig};
pub use schedule::ScheduleConfig;
pub use trainer::{evaluate, LocalTrainer, RoundOutput, StepTelemetry, TrainTask};

use crate::data::DataError;
use crate::params::ParamError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("token {token} at row {row}, position {position} is outside the vocabulary")]
    TokenOutOfRange { row: usize, position: usize, token: u32 },
    #[error("sequence of {positions} positions exceeds context length {context_len}")]
    TooLong { positions: usize, context_len: usize },
    #[error("expected {expected} parameters, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {step} (client {client:?})")]
    NonFiniteLoss { client: Option<u32>, step: u64 },
    #[error("optimizer produced non-finite value {value} at index {index}")]
    NonFiniteUpdate { index: usize, value: f32 },
    #[error("a round needs at least one local step")]
    ZeroSteps,
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// `exp(mean cross-entropy)`.
pub fn perplexity(mean_ce: f64) -> f64 {
    mean_ce.exp()
}
