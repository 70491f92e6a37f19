//! The federated round state machine: node managers and workers, update
//! intake and aggregation, fault injection, dropout/join handling and
//! checkpoint/resume.

mod baseline;
mod blobs;
mod events;
mod fault;
mod runtime;
mod state;

pub use baseline::{run_centralized, BaselineOutcome};
pub use blobs::{decode_client_blob, decode_global_blob, encode_client_blob, encode_global_blob, ClientBlob};
pub use events::{Event, EventLog};
pub use fault::{FaultKind, FaultPlan, FaultSpec, Phase, Trigger};
pub use runtime::{IntakeOutcome, Orchestrator, RoundIntake, TrainingOutcome, WorkerContext};
pub use state::{
    checkpoint_server, handle_dropout, handle_join, restore_server, NodeManagerState, Restore, Restored, RoundPlan,
    ServerState,
};

use crate::config::ConfigError;
use crate::data::DataError;
use crate::fedopt::FedOptError;
use crate::params::{CheckpointError, ParamError};
use crate::telemetry::ArchiveError;
use crate::train::TrainError;
use crate::transport::{FrameError, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    FedOpt(#[from] FedOptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("event log: {0}")]
    Io(#[from] std::io::Error),
    #[error("no checkpoint found")]
    NoCheckpoint,
    #[error("store already holds checkpoints up to round {0}; resume instead")]
    AlreadyStarted(u64),
    #[error("server crashed at round {round} ({phase:?})")]
    ServerCrash { round: u64, phase: Phase },
    #[error("round {round} finished with no surviving contributors")]
    NoContributors { round: u64 },
    #[error("every node manager has failed")]
    AllManagersFailed,
    #[error("roster is empty")]
    NoNodeManagers,
    #[error("plan is for round {got}, server is at round {expected}")]
    PlanMismatch { expected: u64, got: u64 },
    #[error("node manager {0} is not in the roster")]
    UnknownNodeManager(u32),
    #[error("node manager {0} is already in the roster")]
    DuplicateNodeManager(u32),
    #[error("node manager {0} offers no worker slots")]
    ZeroWorkerSlots(u32),
    #[error("client {client} cannot be hosted: {reason}")]
    ClientUnavailable { client: u32, reason: String },
    #[error("checkpoint was written by a different configuration")]
    ConfigHashMismatch,
    #[error("global model for round {0} already published with different contents")]
    GlobalConflict(u64),
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
}
