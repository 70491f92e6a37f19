//! Federated aggregation and the server-side optimizer.
//!
//! Clients report deltas `w_prev - w_client`. The aggregator forms the
//! pseudo-gradient as the `n_k`-weighted mean of those deltas, and the server
//! optimizer treats it like a gradient.

mod aggregate;
mod sampler;
mod server_opt;

pub use aggregate::{client_weight, AggregatorState, ClientUpdate, ReductionMode};
pub use sampler::SamplerState;
pub use server_opt::ServerOptState;

use crate::params::ParamError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FedOptError {
    #[error("total sample count is zero")]
    ZeroTotal,
    #[error("client weight needs 1 <= n_k <= n_total, got n_k={n_k}, n_total={n_total}")]
    InvalidCount { n_k: u64, n_total: u64 },
    #[error("client {client} already contributed to round {round}")]
    DuplicateContributor { client: u32, round: u64 },
    #[error("update for round {got} offered to aggregator of round {expected}")]
    RoundMismatch { expected: u64, got: u64 },
    #[error("delta has {got} elements, model has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no contributions to aggregate")]
    Empty,
    #[error("cannot merge aggregators: {0}")]
    Merge(String),
    #[error("server step produced non-finite parameters in round {round}: {source}")]
    NonFinite { round: u64, source: ParamError },
    #[error("invalid server optimizer setting: {0}")]
    InvalidHyper(String),
    #[error("participation fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("client pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Param(#[from] ParamError),
}
