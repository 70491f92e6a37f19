use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::blobs::{decode_client_blob, decode_global_blob, encode_client_blob, encode_global_blob, ClientBlob};
use super::events::EventLog;
use super::fault::{FaultKind, FaultPlan, FaultSpec, Phase};
use super::state::{
    checkpoint_server, handle_dropout, handle_join, restore_server, NodeManagerState, Restore, RoundPlan, ServerState,
};
use super::OrchestratorError;
use crate::config::{ExecutionMode, ExperimentConfig};
use crate::data::{split_corpus, BatchIterator, DataSplit, ShardSpec, TokenizedCorpus};
use crate::fedopt::{client_weight, AggregatorState, ReductionMode, SamplerState, ServerOptState};
use crate::params::{LayoutManifest, ParamVector};
use crate::seed::mix;
use crate::telemetry::{compute_round_norms, Archive, MetricsRecord, Scope};
use crate::train::{evaluate, perplexity, LocalTrainer, TinyLM, TrainTask};
use crate::transport::{decode_message, encode_message, BlobKey, BlobStore, ControlMessage, StoreError};

/// Read-only state shared by every worker.
pub struct WorkerContext {
    pub trainer: LocalTrainer,
    pub corpus: Arc<TokenizedCorpus>,
    /// Indexed by client id.
    pub shards: Vec<ShardSpec>,
    pub store: Arc<dyn BlobStore>,
    pub batch_size: usize,
    pub retries: u32,
}

enum WorkerFailure {
    Crashed,
    Failed(String),
}

/// Messages reaching the server's intake queue.
enum Intake {
    Frame(Vec<u8>),
    WorkerCrashed { client: u32, attempt: u32 },
    ClientLost { client: u32, reason: String },
    ManagerDone,
}

struct Job {
    client: u32,
    frame: Vec<u8>,
    crash: Option<Phase>,
}

impl WorkerContext {
    /// One attempt at a task. An update already in the store for this
    /// `(round, client)` is reused instead of training again.
    fn attempt(&self, task: &TrainTask, global_key: &str, crash: Option<Phase>) -> Result<u64, WorkerFailure> {
        let failed = |e: &dyn std::fmt::Display| WorkerFailure::Failed(e.to_string());
        let key = BlobKey::Client { round: task.round, client: task.client_id };
        match self.store.get(key) {
            Ok(bytes) => {
                let blob = decode_client_blob(&bytes).map_err(|e| failed(&e))?;
                return Ok(blob.update.n_k);
            }
            Err(StoreError::NotFound(_)) => {}
            Err(e) => return Err(failed(&e)),
        }
        if crash.is_some_and(|p| p != Phase::PostPublish) {
            return Err(WorkerFailure::Crashed);
        }
        let global_key: BlobKey = global_key.parse().map_err(|e| failed(&e))?;
        let bytes = self.store.get(global_key).map_err(|e| failed(&e))?;
        let (_, global) = decode_global_blob(&bytes, self.trainer.model.manifest()).map_err(|e| failed(&e))?;
        let shard = self
            .shards
            .get(task.client_id as usize)
            .ok_or_else(|| WorkerFailure::Failed(format!("client {} has no shard", task.client_id)))?;
        let mut iter = BatchIterator::new(self.corpus.clone(), shard.indices.clone(), self.batch_size, task.data_seed)
            .map_err(|e| failed(&e))?;
        let out = self.trainer.train_round(&global, &mut iter, task).map_err(|e| failed(&e))?;
        let n_k = out.update.n_k;
        let blob = ClientBlob { update: out.update, local_steps: task.local_steps, telemetry: out.telemetry };
        let bytes = encode_client_blob(&blob).map_err(|e| failed(&e))?;
        match self.store.put(key, &bytes) {
            Ok(_) | Err(StoreError::Conflict(_)) => {}
            Err(e) => return Err(failed(&e)),
        }
        if crash == Some(Phase::PostPublish) {
            return Err(WorkerFailure::Crashed);
        }
        Ok(n_k)
    }

    fn run_job(&self, job: Job, alive: &AtomicBool, tx: &Sender<Intake>) {
        let lost = |reason: String| {
            let _ = tx.send(Intake::ClientLost { client: job.client, reason });
        };
        let (task, global_key) = match decode_message(&job.frame) {
            Ok(ControlMessage::TrainTask { round, client_id, local_steps, schedule_offset, data_seed, blob_key }) => {
                (TrainTask { client_id, round, local_steps, schedule_offset, data_seed }, blob_key)
            }
            Ok(other) => return lost(format!("unexpected task frame {other:?}")),
            Err(e) => return lost(e.to_string()),
        };
        let mut crash = job.crash;
        for attempt in 0..=self.retries {
            if !alive.load(Ordering::SeqCst) {
                return;
            }
            match self.attempt(&task, &global_key, crash.take()) {
                Ok(n_k) => {
                    if alive.load(Ordering::SeqCst) {
                        let key = BlobKey::Client { round: task.round, client: task.client_id };
                        let msg = ControlMessage::UpdateReady {
                            round: task.round,
                            client_id: task.client_id,
                            n_k,
                            blob_key: key.to_string(),
                        };
                        let _ = tx.send(Intake::Frame(encode_message(&msg)));
                    }
                    return;
                }
                Err(WorkerFailure::Crashed) => {
                    let _ = tx.send(Intake::WorkerCrashed { client: task.client_id, attempt });
                }
                Err(WorkerFailure::Failed(reason)) => return lost(reason),
            }
        }
        lost(format!("worker crashed {} times", self.retries + 1));
    }

    /// A node manager: announces itself, then drains its jobs with at most
    /// `slots` concurrent workers.
    fn run_manager(&self, nm: u32, round: u64, slots: u32, jobs: Vec<Job>, alive: &AtomicBool, tx: &Sender<Intake>) {
        let _ = tx.send(Intake::Frame(encode_message(&ControlMessage::Heartbeat { id: nm, round })));
        let workers = (slots as usize).min(jobs.len());
        let queue = Mutex::new(jobs.into_iter().collect::<VecDeque<_>>());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let job = queue.lock().unwrap_or_else(|e| e.into_inner()).pop_front();
                    match job {
                        Some(job) => self.run_job(job, alive, tx),
                        None => break,
                    }
                });
            }
        });
        let _ = tx.send(Intake::ManagerDone);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IntakeOutcome {
    Accepted { client: u32 },
    /// Addressed to another round.
    Stale { client: u32, round: u64 },
    /// From a client this round no longer waits for.
    Unexpected { client: u32 },
    Duplicate { client: u32 },
    Rejected { client: u32, reason: String },
    Heartbeat { id: u32 },
    Ignored,
}

/// The server's view of one round's incoming updates.
pub struct RoundIntake {
    round: u64,
    expected: BTreeSet<u32>,
    excluded: BTreeSet<u32>,
    aggregator: AggregatorState,
    accepted: BTreeMap<u32, ClientBlob>,
}

impl RoundIntake {
    pub fn new(round: u64, expected: BTreeSet<u32>, len: usize, mode: ReductionMode) -> Self {
        Self {
            round,
            expected,
            excluded: BTreeSet::new(),
            aggregator: AggregatorState::new(round, len, mode),
            accepted: BTreeMap::new(),
        }
    }

    /// Stops waiting for `client`; anything it sends later is ignored.
    pub fn exclude(&mut self, client: u32) {
        if !self.accepted.contains_key(&client) && self.expected.remove(&client) {
            self.excluded.insert(client);
        }
    }

    pub fn is_complete(&self) -> bool {
        self.expected.iter().all(|c| self.accepted.contains_key(c))
    }

    pub fn missing(&self) -> Vec<u32> {
        self.expected.iter().filter(|c| !self.accepted.contains_key(c)).copied().collect()
    }

    pub fn aggregator(&self) -> &AggregatorState {
        &self.aggregator
    }

    pub fn accepted(&self) -> &BTreeMap<u32, ClientBlob> {
        &self.accepted
    }

    pub fn offer(&mut self, frame: &[u8], store: &dyn BlobStore) -> Result<IntakeOutcome, OrchestratorError> {
        let (round, client, n_k, blob_key) = match decode_message(frame)? {
            ControlMessage::UpdateReady { round, client_id, n_k, blob_key } => (round, client_id, n_k, blob_key),
            ControlMessage::Heartbeat { id, .. } => return Ok(IntakeOutcome::Heartbeat { id }),
            _ => return Ok(IntakeOutcome::Ignored),
        };
        if round != self.round {
            return Ok(IntakeOutcome::Stale { client, round });
        }
        if !self.expected.contains(&client) {
            return Ok(IntakeOutcome::Unexpected { client });
        }
        if self.accepted.contains_key(&client) {
            return Ok(IntakeOutcome::Duplicate { client });
        }
        let reject = |reason: String| Ok(IntakeOutcome::Rejected { client, reason });
        let key = BlobKey::Client { round, client };
        if blob_key != key.to_string() {
            return reject(format!("blob key {blob_key:?} does not name {key}"));
        }
        let blob = match store.get(key).map_err(OrchestratorError::from).and_then(|b| Ok(decode_client_blob(&b)?)) {
            Ok(blob) => blob,
            Err(e) => return reject(e.to_string()),
        };
        let u = &blob.update;
        if u.round != round || u.client_id != client || u.n_k != n_k {
            return reject("blob contents disagree with the announcement".into());
        }
        if let Err(e) = self.aggregator.accumulate(u) {
            return reject(e.to_string());
        }
        self.accepted.insert(client, blob);
        Ok(IntakeOutcome::Accepted { client })
    }
}

pub struct TrainingOutcome {
    pub state: ServerState,
    pub archive: Archive,
}

/// The federated runtime: server decision loop plus in-process node
/// managers and workers.
pub struct Orchestrator {
    config: ExperimentConfig,
    ctx: Arc<WorkerContext>,
    split: DataSplit,
    eval_indices: Vec<usize>,
    faults: FaultPlan,
    events: EventLog,
    archive: Archive,
    /// Records not yet written to a checkpoint.
    pending: Vec<MetricsRecord>,
}

pub(crate) struct Prepared {
    pub trainer: LocalTrainer,
    pub corpus: Arc<TokenizedCorpus>,
    pub split: DataSplit,
    pub eval_indices: Vec<usize>,
}

pub(crate) fn prepare(config: &ExperimentConfig) -> Result<Prepared, OrchestratorError> {
    config.validate()?;
    let corpus = Arc::new(config.load_corpus()?);
    let split = split_corpus(
        &corpus,
        config.federation.n_clients as usize,
        config.data.validation_fraction,
        config.data.seed,
    )?;
    let mut eval_indices = split.validation.clone();
    if let Some(n) = config.data.eval_samples {
        eval_indices.truncate(n);
    }
    let model = TinyLM::new(config.model.clone())?;
    let trainer = LocalTrainer::new(
        model,
        config.adamw.clone(),
        config.schedule.clone(),
        config.local.max_grad_norm,
        config.micro_batch_size(),
    )?;
    Ok(Prepared { trainer, corpus, split, eval_indices })
}

/// Seed of client `client`'s batch stream.
pub(crate) fn client_data_seed(config: &ExperimentConfig, client: u32) -> u64 {
    mix(mix(config.data.seed, 0xDA7A), client as u64)
}

impl Orchestrator {
    pub fn new(config: ExperimentConfig, store: Arc<dyn BlobStore>) -> Result<Self, OrchestratorError> {
        let faults = FaultPlan::new(config.faults.iter().cloned());
        Self::build(config, store, faults, Archive::new())
    }

    fn build(
        config: ExperimentConfig,
        store: Arc<dyn BlobStore>,
        faults: FaultPlan,
        archive: Archive,
    ) -> Result<Self, OrchestratorError> {
        let p = prepare(&config)?;
        let ctx = WorkerContext {
            trainer: p.trainer,
            corpus: p.corpus,
            shards: p.split.shards.clone(),
            store,
            batch_size: config.local.batch_size,
            retries: config.federation.worker_retries,
        };
        Ok(Self {
            config,
            ctx: Arc::new(ctx),
            split: p.split,
            eval_indices: p.eval_indices,
            faults,
            events: EventLog::in_memory(),
            archive,
            pending: Vec::new(),
        })
    }

    /// Restores the latest checkpoint in `store` and rebuilds the runtime
    /// from the configuration saved with it.
    pub fn resume(store: Arc<dyn BlobStore>) -> Result<(Self, ServerState), OrchestratorError> {
        let restored = match restore_server(&*store)? {
            Restore::Fresh => return Err(OrchestratorError::NoCheckpoint),
            Restore::Resumed(r) => r,
        };
        let round = restored.state.round;
        let faults = FaultPlan::for_resume(restored.config.faults.iter().cloned(), round);
        let mut archive = Archive::new();
        archive.extend(restored.metrics)?;
        archive.truncate_from(round);
        let mut orch = Self::build(restored.config, store, faults, archive)?;
        orch.log(round, "resume", json!({ "round": round }))?;
        Ok((orch, restored.state))
    }

    /// Mirrors the event log to a JSON-lines file (appending).
    pub fn with_event_log(mut self, path: &Path) -> Result<Self, OrchestratorError> {
        let mut log = EventLog::open(path)?;
        for e in self.events.events() {
            log.log(e.round, &e.event, e.detail.clone())?;
        }
        self.events = log;
        Ok(self)
    }

    pub fn inject_fault(&mut self, spec: FaultSpec) {
        self.faults.inject(spec);
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn store(&self) -> &Arc<dyn BlobStore> {
        &self.ctx.store
    }

    pub fn trainer(&self) -> &LocalTrainer {
        &self.ctx.trainer
    }

    pub fn split(&self) -> &DataSplit {
        &self.split
    }

    pub fn corpus(&self) -> &Arc<TokenizedCorpus> {
        &self.ctx.corpus
    }

    fn manifest(&self) -> &LayoutManifest {
        self.ctx.trainer.model.manifest()
    }

    fn log(&mut self, round: u64, event: &str, detail: serde_json::Value) -> Result<(), OrchestratorError> {
        Ok(self.events.log(round, event, detail)?)
    }

    fn record(&mut self, rec: MetricsRecord) -> Result<(), OrchestratorError> {
        self.archive.record(rec.clone())?;
        self.pending.push(rec);
        Ok(())
    }

    pub fn initial_state(&self) -> Result<ServerState, OrchestratorError> {
        let fed = &self.config.federation;
        Ok(ServerState {
            round: 0,
            global: self.ctx.trainer.model.init_params(),
            server_opt: ServerOptState::new(fed.server_lr, fed.server_momentum, fed.nesterov)?,
            sampler: SamplerState::new(fed.sampler_seed, fed.participation)?,
            roster: self.config.initial_roster().into_iter().map(|nm| (nm.id, nm)).collect(),
            config_hash: self.config.hash(),
        })
    }

    /// Mean validation cross-entropy of `params`.
    pub fn evaluate(&self, params: &ParamVector) -> Result<f64, OrchestratorError> {
        Ok(evaluate(
            &self.ctx.trainer.model,
            params,
            &self.ctx.corpus,
            &self.eval_indices,
            self.config.data.eval_batch_size,
        )?)
    }

    fn record_eval(&mut self, round: u64, params: &ParamVector) -> Result<(), OrchestratorError> {
        let loss = self.evaluate(params)?;
        self.record(MetricsRecord::new(Scope::Eval, round).with("loss", loss).with("perplexity", perplexity(loss)))
    }

    /// Samples this round's clients from those currently hosted.
    pub fn plan_round(&self, state: &ServerState) -> Result<RoundPlan, OrchestratorError> {
        let mut sampler = state.sampler.clone();
        sampler.round = state.round;
        let clients = sampler.sample(&state.available_clients())?;
        let tasks = clients
            .into_iter()
            .map(|c| TrainTask {
                client_id: c,
                round: state.round,
                local_steps: self.config.local_steps_for(c),
                schedule_offset: state.round * self.config.federation.local_steps,
                data_seed: client_data_seed(&self.config, c),
            })
            .collect();
        Ok(RoundPlan { round: state.round, tasks })
    }

    fn checkpoint(&mut self, state: &ServerState) -> Result<(), OrchestratorError> {
        let pending = std::mem::take(&mut self.pending);
        let (key, bytes) = checkpoint_server(&*self.ctx.store, state, &self.config, self.manifest(), &pending)?;
        self.log(state.round, "checkpoint", json!({ "key": key.to_string(), "bytes": bytes }))
    }

    /// Applies the faults due at `(round, phase)`. Returns the state and the
    /// managers that dropped.
    fn fire(
        &mut self,
        mut state: ServerState,
        round: u64,
        phase: Phase,
    ) -> Result<(ServerState, Vec<u32>), OrchestratorError> {
        let mut dropped = Vec::new();
        for spec in self.faults.take(round, phase) {
            self.log(round, "fault", serde_json::to_value(&spec).expect("faults serialize"))?;
            match spec.kind {
                FaultKind::ServerCrash => {
                    self.log(round, "server_crash", json!({ "phase": phase }))?;
                    return Err(OrchestratorError::ServerCrash { round, phase });
                }
                FaultKind::NodeManagerDrop { node_manager_id } => {
                    let frame = encode_message(&ControlMessage::Leave { node_manager_id });
                    let ControlMessage::Leave { node_manager_id: id } = decode_message(&frame)? else {
                        unreachable!("leave frame decodes to leave")
                    };
                    let Some(nm) = state.roster.get(&id).cloned() else {
                        self.log(round, "fault_ignored", json!({ "reason": "unknown node manager", "id": id }))?;
                        continue;
                    };
                    state = handle_dropout(state, id)?;
                    dropped.push(id);
                    self.log(round, "node_manager_drop", json!({ "id": id, "clients": nm.clients }))?;
                }
                FaultKind::NodeManagerJoin { node_manager_id, worker_slots } => {
                    let frame = encode_message(&ControlMessage::Join { node_manager_id, worker_slots });
                    let ControlMessage::Join { node_manager_id: id, worker_slots: slots } = decode_message(&frame)? else {
                        unreachable!("join frame decodes to join")
                    };
                    let nm = NodeManagerState { id, worker_slots: slots, clients: Vec::new() };
                    match handle_join(state.clone(), nm, self.config.federation.n_clients) {
                        Ok(next) => {
                            let clients = next.roster[&id].clients.clone();
                            state = next;
                            self.log(round, "node_manager_join", json!({ "id": id, "clients": clients }))?;
                        }
                        Err(e) => self.log(round, "join_rejected", json!({ "id": id, "reason": e.to_string() }))?,
                    }
                }
                FaultKind::WorkerCrash { .. } => unreachable!("worker crashes are taken at dispatch"),
            }
        }
        Ok((state, dropped))
    }

    /// Runs `config.federation.rounds` rounds from the initial model. The
    /// store must not already hold a run.
    pub fn run_training(&mut self) -> Result<TrainingOutcome, OrchestratorError> {
        if let Restore::Resumed(r) = restore_server(&*self.ctx.store)? {
            return Err(OrchestratorError::AlreadyStarted(r.state.round));
        }
        let state = self.initial_state()?;
        self.log(0, "start", json!({ "config_hash": state.config_hash, "rounds": self.config.federation.rounds }))?;
        self.record_eval(0, &state.global)?;
        self.checkpoint(&state)?;
        let (state, _) = self.fire(state, 0, Phase::PostCheckpoint)?;
        self.run_rounds(state)
    }

    /// Continues a restored state up to the configured round count.
    pub fn continue_training(&mut self, state: ServerState) -> Result<TrainingOutcome, OrchestratorError> {
        let round = state.round;
        let (state, _) = self.fire(state, round, Phase::PostCheckpoint)?;
        self.run_rounds(state)
    }

    fn run_rounds(&mut self, mut state: ServerState) -> Result<TrainingOutcome, OrchestratorError> {
        while state.round < self.config.federation.rounds {
            state = self.next_round(state)?;
        }
        self.log(state.round, "complete", json!({}))?;
        Ok(TrainingOutcome { state, archive: self.archive.clone() })
    }

    /// Fires the round's pre-dispatch faults, plans it and runs it.
    pub fn next_round(&mut self, state: ServerState) -> Result<ServerState, OrchestratorError> {
        let t = state.round;
        let (state, _) = self.fire(state, t, Phase::PreDispatch)?;
        if state.roster.is_empty() {
            return Err(OrchestratorError::NoNodeManagers);
        }
        let plan = self.plan_round(&state)?;
        self.run_round(state, &plan)
    }

    fn publish_global(&mut self, state: &ServerState) -> Result<(), OrchestratorError> {
        let t = state.round;
        let key = BlobKey::Global { round: t };
        let bytes = encode_global_blob(t, &state.global, self.manifest())?;
        match self.ctx.store.put(key, &bytes) {
            Ok(r) => self.log(t, "publish", json!({ "key": key.to_string(), "bytes": r.bytes })),
            Err(StoreError::Conflict(_)) => {
                if self.ctx.store.get(key)? != bytes {
                    return Err(OrchestratorError::GlobalConflict(t));
                }
                self.log(t, "publish_reused", json!({ "key": key.to_string() }))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// One federated round: publish, dispatch, collect, aggregate, step,
    /// checkpoint.
    pub fn run_round(&mut self, state: ServerState, plan: &RoundPlan) -> Result<ServerState, OrchestratorError> {
        let t = state.round;
        if plan.round != t {
            return Err(OrchestratorError::PlanMismatch { expected: t, got: plan.round });
        }
        if state.roster.is_empty() {
            return Err(OrchestratorError::NoNodeManagers);
        }
        let planned: Vec<u32> = plan.tasks.iter().map(|task| task.client_id).collect();
        self.log(t, "round_start", json!({ "clients": planned }))?;
        self.publish_global(&state)?;
        let (state, _) = self.fire(state, t, Phase::PostPublish)?;

        let crashes: BTreeMap<u32, Phase> = self.faults.take_worker_crashes(t).into_iter().collect();
        let global_key = BlobKey::Global { round: t }.to_string();
        let mut jobs: BTreeMap<u32, Vec<Job>> = BTreeMap::new();
        for task in &plan.tasks {
            let Some(nm) = state.manager_of(task.client_id) else {
                self.log(t, "task_unassigned", json!({ "client": task.client_id }))?;
                continue;
            };
            let frame = encode_message(&ControlMessage::TrainTask {
                round: t,
                client_id: task.client_id,
                local_steps: task.local_steps,
                schedule_offset: task.schedule_offset,
                data_seed: task.data_seed,
                blob_key: global_key.clone(),
            });
            let crash = crashes.get(&task.client_id).copied();
            jobs.entry(nm).or_default().push(Job { client: task.client_id, frame, crash });
        }
        let expected: BTreeSet<u32> = jobs.values().flatten().map(|j| j.client).collect();
        let clients_of: BTreeMap<u32, Vec<u32>> =
            jobs.iter().map(|(&nm, js)| (nm, js.iter().map(|j| j.client).collect())).collect();
        for (nm, clients) in &clients_of {
            self.log(t, "dispatch", json!({ "node_manager": nm, "clients": clients }))?;
        }
        let alive: BTreeMap<u32, Arc<AtomicBool>> =
            jobs.keys().map(|&nm| (nm, Arc::new(AtomicBool::new(true)))).collect();
        let stop_all = || alive.values().for_each(|a| a.store(false, Ordering::SeqCst));
        let mut intake = RoundIntake::new(t, expected, state.global.len(), self.config.runtime.reduction_mode());
        let deadline = self.config.federation.round_deadline_s.map(|s| Instant::now() + Duration::from_secs_f64(s));
        let n_managers = jobs.len();
        let (tx, rx) = mpsc::channel::<Intake>();

        let outcome = match self.config.runtime.mode {
            ExecutionMode::Threads => thread::scope(|scope| {
                for (nm, js) in jobs {
                    let (ctx, tx, flag) = (self.ctx.clone(), tx.clone(), alive[&nm].clone());
                    let slots = state.roster[&nm].worker_slots;
                    scope.spawn(move || ctx.run_manager(nm, t, slots, js, &flag, &tx));
                }
                drop(tx);
                let result = self
                    .after_dispatch(state, t, &clients_of, &alive, &mut intake)
                    .and_then(|state| self.collect(&mut intake, &rx, deadline, n_managers).map(|_| state));
                stop_all();
                result
            }),
            ExecutionMode::Sequential => {
                let result = self.after_dispatch(state, t, &clients_of, &alive, &mut intake);
                if result.is_ok() {
                    let mut order: Vec<(u32, Job)> =
                        jobs.into_iter().flat_map(|(nm, js)| js.into_iter().map(move |j| (nm, j))).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.runtime.arrival_seed, t)));
                    for (nm, job) in order {
                        self.ctx.run_job(job, &alive[&nm], &tx);
                    }
                    for _ in 0..n_managers {
                        let _ = tx.send(Intake::ManagerDone);
                    }
                }
                drop(tx);
                result.and_then(|state| self.collect(&mut intake, &rx, deadline, n_managers).map(|_| state))
            }
        };
        let state = outcome?;
        self.finish_round(state, intake)
    }

    fn after_dispatch(
        &mut self,
        state: ServerState,
        t: u64,
        clients_of: &BTreeMap<u32, Vec<u32>>,
        alive: &BTreeMap<u32, Arc<AtomicBool>>,
        intake: &mut RoundIntake,
    ) -> Result<ServerState, OrchestratorError> {
        let (state, dropped) = self.fire(state, t, Phase::MidTrain)?;
        for nm in dropped {
            if let Some(flag) = alive.get(&nm) {
                flag.store(false, Ordering::SeqCst);
            }
            for &c in clients_of.get(&nm).into_iter().flatten() {
                intake.exclude(c);
            }
        }
        Ok(state)
    }

    fn collect(
        &mut self,
        intake: &mut RoundIntake,
        rx: &Receiver<Intake>,
        deadline: Option<Instant>,
        n_managers: usize,
    ) -> Result<(), OrchestratorError> {
        let t = intake.round;
        let mut done = 0;
        while !intake.is_complete() && done < n_managers {
            let msg = match deadline {
                Some(d) => match rx.recv_timeout(d.saturating_duration_since(Instant::now())) {
                    Ok(m) => m,
                    Err(RecvTimeoutError::Timeout) => {
                        self.log(t, "deadline", json!({ "missing": intake.missing() }))?;
                        break;
                    }
                    Err(RecvTimeoutError::Disconnected) => break,
                },
                None => match rx.recv() {
                    Ok(m) => m,
                    Err(_) => break,
                },
            };
            match msg {
                Intake::Frame(bytes) => match intake.offer(&bytes, &*self.ctx.store) {
                    Ok(IntakeOutcome::Accepted { client }) => {
                        let n_k = intake.accepted[&client].update.n_k;
                        self.log(t, "update_accepted", json!({ "client": client, "n_k": n_k }))?;
                    }
                    Ok(IntakeOutcome::Heartbeat { id }) => self.log(t, "heartbeat", json!({ "id": id }))?,
                    Ok(other) => self.log(t, "update_ignored", json!({ "outcome": format!("{other:?}") }))?,
                    Err(e) => self.log(t, "frame_error", json!({ "error": e.to_string() }))?,
                },
                Intake::WorkerCrashed { client, attempt } => {
                    self.log(t, "worker_crash", json!({ "client": client, "attempt": attempt }))?
                }
                Intake::ClientLost { client, reason } => {
                    intake.exclude(client);
                    self.log(t, "client_dropped", json!({ "client": client, "reason": reason }))?;
                }
                Intake::ManagerDone => done += 1,
            }
        }
        Ok(())
    }

    fn finish_round(&mut self, state: ServerState, intake: RoundIntake) -> Result<ServerState, OrchestratorError> {
        let t = state.round;
        let agg = intake.aggregator();
        if agg.is_empty() {
            return Err(OrchestratorError::NoContributors { round: t });
        }
        let delta = agg.finalize()?;
        let (w_new, opt_new) = state.server_opt.step(&state.global, &delta, t)?;
        let total = agg.total_weight();
        self.log(
            t,
            "aggregate",
            json!({ "contributors": agg.contributors(), "total_weight": total, "pseudograd_norm": delta.l2_norm() }),
        )?;

        let mut models = Vec::with_capacity(intake.accepted().len());
        let mut weight_sum = 0.0;
        let mut loss_sum = 0.0;
        for (&client, blob) in intake.accepted() {
            let u = &blob.update;
            let weight = client_weight(u.n_k, total)?;
            weight_sum += weight;
            let model = state.global.sub(&u.delta)?;
            let loss = u.local_metrics.get("loss").copied().unwrap_or(f64::NAN);
            loss_sum += weight * loss;
            for st in &blob.telemetry {
                self.record(
                    MetricsRecord::new(Scope::ClientStep, t)
                        .client(client)
                        .at_step(st.step)
                        .with("loss", st.loss)
                        .with("perplexity", perplexity(st.loss))
                        .with("lr", st.lr)
                        .with("grad_norm_raw", st.grad_norm_raw)
                        .with("grad_norm_applied", st.grad_norm_applied)
                        .with("param_norm", st.param_norm),
                )?;
            }
            self.record(
                MetricsRecord::new(Scope::ClientRound, t)
                    .client(client)
                    .with("loss", loss)
                    .with("perplexity", perplexity(loss))
                    .with("param_norm", model.l2_norm())
                    .with("delta_norm", u.delta.l2_norm())
                    .with("weight", weight)
                    .with("n_k", u.n_k as f64)
                    .with("local_steps", blob.local_steps as f64),
            )?;
            models.push((u.n_k as f64, model));
        }
        let refs: Vec<(f64, &ParamVector)> = models.iter().map(|(w, m)| (*w, m)).collect();
        let norms = compute_round_norms(&state.global, &refs, opt_new.momentum.as_ref())?;
        self.record(
            MetricsRecord::new(Scope::ServerRound, t)
                .with("loss", loss_sum)
                .with("perplexity", perplexity(loss_sum))
                .with("pseudograd_norm", norms.pseudograd_norm)
                .with("global_norm", norms.global_norm)
                .with("avg_client_norm", norms.avg_client_norm)
                .with("momentum_norm", norms.momentum_norm)
                .with("param_norm", w_new.l2_norm())
                .with("contributors", agg.contributors().len() as f64)
                .with("weight_sum", weight_sum),
        )?;
        drop(models);

        let mut sampler = state.sampler.clone();
        sampler.round = t + 1;
        let next = ServerState { round: t + 1, global: w_new, server_opt: opt_new, sampler, ..state };
        self.record_eval(t + 1, &next.global)?;
        self.checkpoint(&next)?;
        let (next, _) = self.fire(next, t + 1, Phase::PostCheckpoint)?;
        Ok(next)
    }
}
