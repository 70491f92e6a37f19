use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::config::ExperimentConfig;
use crate::fedopt::{SamplerState, ServerOptState};
use crate::params::{Checkpoint, LayoutManifest, ParamVector};
use crate::telemetry::MetricsRecord;
use crate::train::TrainTask;
use crate::transport::{BlobKey, BlobStore};

/// A machine hosting some clients, running at most `worker_slots` of them
/// at once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeManagerState {
    pub id: u32,
    pub worker_slots: u32,
    #[serde(default)]
    pub clients: Vec<u32>,
}

/// Everything the server needs to continue from a round boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub round: u64,
    pub global: ParamVector,
    pub server_opt: ServerOptState,
    pub sampler: SamplerState,
    pub roster: BTreeMap<u32, NodeManagerState>,
    pub config_hash: String,
}

impl ServerState {
    /// Clients hosted by some manager, ascending.
    pub fn available_clients(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.roster.values().flat_map(|nm| nm.clients.iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn manager_of(&self, client: u32) -> Option<u32> {
        self.roster.values().find(|nm| nm.clients.contains(&client)).map(|nm| nm.id)
    }

    /// Clients in `0..n_clients` that no manager hosts.
    pub fn unhosted_clients(&self, n_clients: u32) -> Vec<u32> {
        let hosted: BTreeSet<u32> = self.available_clients().into_iter().collect();
        (0..n_clients).filter(|c| !hosted.contains(c)).collect()
    }
}

/// The tasks of one round, one per sampled client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: u64,
    pub tasks: Vec<TrainTask>,
}

/// Removes `failed` from the roster. Its clients stay unhosted until a
/// manager adopts them.
pub fn handle_dropout(mut state: ServerState, failed: u32) -> Result<ServerState, OrchestratorError> {
    if state.roster.remove(&failed).is_none() {
        return Err(OrchestratorError::UnknownNodeManager(failed));
    }
    if state.roster.is_empty() {
        return Err(OrchestratorError::AllManagersFailed);
    }
    Ok(state)
}

/// Adds `nm` to the roster. With no clients listed, it adopts the
/// lowest-numbered unhosted clients, one per worker slot.
pub fn handle_join(
    mut state: ServerState,
    mut nm: NodeManagerState,
    n_clients: u32,
) -> Result<ServerState, OrchestratorError> {
    if nm.worker_slots == 0 {
        return Err(OrchestratorError::ZeroWorkerSlots(nm.id));
    }
    if state.roster.contains_key(&nm.id) {
        return Err(OrchestratorError::DuplicateNodeManager(nm.id));
    }
    let unhosted = state.unhosted_clients(n_clients);
    if nm.clients.is_empty() {
        nm.clients = unhosted.into_iter().take(nm.worker_slots as usize).collect();
    } else {
        for &c in &nm.clients {
            if !unhosted.contains(&c) {
                let reason = if c >= n_clients { "no such client" } else { "already hosted" };
                return Err(OrchestratorError::ClientUnavailable { client: c, reason: reason.into() });
            }
        }
    }
    state.roster.insert(nm.id, nm);
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct ServerOptHyper {
    eta: f64,
    mu: f64,
    nesterov: bool,
}

/// Writes the state as `ckpt/server-{round}` together with the metrics
/// recorded since the previous checkpoint.
pub fn checkpoint_server(
    store: &dyn BlobStore,
    state: &ServerState,
    config: &ExperimentConfig,
    manifest: &LayoutManifest,
    metrics: &[MetricsRecord],
) -> Result<(BlobKey, u64), OrchestratorError> {
    let opt = &state.server_opt;
    let mut ckpt = Checkpoint::new()
        .with_u64("round", state.round)
        .with_vector("global", &state.global)
        .with_manifest(manifest)
        .with_json("server_opt", &ServerOptHyper { eta: opt.eta, mu: opt.mu, nesterov: opt.nesterov })
        .with_json("sampler", &state.sampler)
        .with_json("roster", &state.roster.values().collect::<Vec<_>>())
        .with_json("config", config)
        .with_json("config_hash", &state.config_hash)
        .with_json("metrics", &metrics);
    if let Some(m) = &opt.momentum {
        ckpt = ckpt.with_vector("momentum", m);
    }
    let key = BlobKey::ServerCheckpoint { round: state.round };
    let receipt = store.put(key, &ckpt.to_bytes()?)?;
    Ok((key, receipt.bytes))
}

#[derive(Debug)]
pub struct Restored {
    pub state: ServerState,
    pub config: ExperimentConfig,
    /// Metrics from every checkpoint up to and including the restored one.
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug)]
pub enum Restore {
    /// The store holds no server checkpoint.
    Fresh,
    Resumed(Box<Restored>),
}

fn checkpoint_rounds(store: &dyn BlobStore) -> Result<Vec<u64>, OrchestratorError> {
    let mut rounds: Vec<u64> = store
        .list("ckpt/")?
        .iter()
        .filter_map(|k| match k.parse::<BlobKey>() {
            Ok(BlobKey::ServerCheckpoint { round }) => Some(round),
            _ => None,
        })
        .collect();
    rounds.sort_unstable();
    Ok(rounds)
}

/// Loads the latest round-boundary state.
pub fn restore_server(store: &dyn BlobStore) -> Result<Restore, OrchestratorError> {
    let rounds = checkpoint_rounds(store)?;
    let Some(&latest) = rounds.last() else {
        return Ok(Restore::Fresh);
    };
    let mut metrics = Vec::new();
    for &r in &rounds {
        let ckpt = Checkpoint::from_bytes(&store.get(BlobKey::ServerCheckpoint { round: r })?)?;
        metrics.extend(ckpt.json::<Vec<MetricsRecord>>("metrics")?);
    }
    let ckpt = Checkpoint::from_bytes(&store.get(BlobKey::ServerCheckpoint { round: latest })?)?;
    let config: ExperimentConfig = ckpt.json("config")?;
    let config_hash: String = ckpt.json("config_hash")?;
    if config.hash() != config_hash {
        return Err(OrchestratorError::ConfigHashMismatch);
    }
    let round = ckpt.u64("round")?;
    if round != latest {
        return Err(OrchestratorError::Corrupt(format!("checkpoint {latest} claims round {round}")));
    }
    let hyper: ServerOptHyper = ckpt.json("server_opt")?;
    let mut server_opt = ServerOptState::new(hyper.eta, hyper.mu, hyper.nesterov)?;
    server_opt.momentum = ckpt.optional_vector("momentum")?;
    let global = ckpt.vector("global")?;
    if global.len() != ckpt.manifest()?.total_len() {
        return Err(OrchestratorError::Corrupt("global model does not match its manifest".into()));
    }
    let roster: Vec<NodeManagerState> = ckpt.json("roster")?;
    let state = ServerState {
        round,
        global,
        server_opt,
        sampler: ckpt.json("sampler")?,
        roster: roster.into_iter().map(|nm| (nm.id, nm)).collect(),
        config_hash,
    };
    Ok(Restore::Resumed(Box::new(Restored { state, config, metrics })))
}
