use std::sync::Arc;

use fedforge::config::{ExecutionMode, ExperimentConfig};
use fedforge::fedopt::{AggregatorState, ReductionMode, ServerOptState};
use fedforge::orchestrator::{
    decode_client_blob, decode_global_blob, restore_server, FaultKind, FaultSpec, NodeManagerState, Orchestrator,
    OrchestratorError, Phase, Restore,
};
use fedforge::params::Checkpoint;
use fedforge::telemetry::Scope;
use fedforge::transport::{BlobKey, BlobStore, FsStore, MemoryStore};

fn mem() -> Arc<dyn BlobStore> {
    Arc::new(MemoryStore::new())
}

fn contributors_per_round(orch: &Orchestrator) -> Vec<u64> {
    orch.archive().rows(Scope::ServerRound).iter().map(|r| r.get("contributors").unwrap() as u64).collect()
}

#[test]
fn zero_rounds_returns_initial_model() {
    let store = mem();
    let mut orch = Orchestrator::new(ExperimentConfig::tiny(2, 0, 1), store.clone()).unwrap();
    let init = orch.initial_state().unwrap();
    let out = orch.run_training().unwrap();
    assert_eq!(out.state.round, 0);
    assert!(out.state.global.bit_eq(&init.global));
    assert_eq!(store.list("").unwrap(), vec!["ckpt/server-0"]);
    assert_eq!(out.archive.rows(Scope::Eval).len(), 1);
    assert!(out.archive.rows(Scope::ServerRound).is_empty());
}

#[test]
fn twenty_rounds_eight_clients_counts() {
    let mut orch = Orchestrator::new(ExperimentConfig::tiny(8, 20, 2), mem()).unwrap();
    let out = orch.run_training().unwrap();
    assert_eq!(out.state.round, 20);
    assert_eq!(out.archive.rows(Scope::ServerRound).len(), 20);
    assert_eq!(out.archive.rows(Scope::Eval).len(), 21);
    assert_eq!(out.archive.rows(Scope::ClientRound).len(), 160);
    // One client_step row per (client, step) of every executed task.
    assert_eq!(out.archive.rows(Scope::ClientStep).len(), 8 * 20 * 2);
    assert!(contributors_per_round(&orch).iter().all(|&c| c == 8));
    for r in out.archive.rows(Scope::ServerRound) {
        assert!((r.get("weight_sum").unwrap() - 1.0).abs() <= 1e-12);
    }
    let evals = out.archive.rows(Scope::Eval);
    assert!(evals.last().unwrap().get("loss").unwrap() < evals[0].get("loss").unwrap());
}

#[test]
fn single_client_federation_adopts_client_weights() {
    let store = mem();
    let mut orch = Orchestrator::new(ExperimentConfig::tiny(1, 1, 1), store.clone()).unwrap();
    let out = orch.run_training().unwrap();
    let w0 = decode_global_blob(&store.get(BlobKey::Global { round: 0 }).unwrap(), orch.trainer().model.manifest())
        .unwrap()
        .1;
    let blob = decode_client_blob(&store.get(BlobKey::Client { round: 0, client: 0 }).unwrap()).unwrap();
    let client_model = w0.sub(&blob.update.delta).unwrap();
    assert!(out.state.global.bit_eq(&client_model));
}

#[test]
fn arrival_order_does_not_change_the_model() {
    let run = |mode: ExecutionMode, arrival_seed: u64| {
        let mut c = ExperimentConfig::tiny(6, 3, 2);
        c.runtime.mode = mode;
        c.runtime.arrival_seed = arrival_seed;
        c.federation.server_momentum = 0.9;
        c.federation.server_lr = 0.7;
        Orchestrator::new(c, mem()).unwrap().run_training().unwrap().state.global
    };
    let reference = run(ExecutionMode::Sequential, 0);
    for seed in [1, 2, 3] {
        assert!(run(ExecutionMode::Sequential, seed).bit_eq(&reference));
    }
    assert!(run(ExecutionMode::Threads, 0).bit_eq(&reference));
}

#[test]
fn sequential_arrival_order_actually_varies() {
    let order = |seed: u64| {
        let mut c = ExperimentConfig::tiny(6, 1, 1);
        c.runtime.mode = ExecutionMode::Sequential;
        c.runtime.arrival_seed = seed;
        let mut orch = Orchestrator::new(c, mem()).unwrap();
        orch.run_training().unwrap();
        orch.events().named("update_accepted").map(|e| e.detail["client"].as_u64().unwrap()).collect::<Vec<_>>()
    };
    let orders: std::collections::BTreeSet<Vec<u64>> = (0..4).map(order).collect();
    assert!(orders.len() > 1);
}

fn crash_config(rounds: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::tiny(4, rounds, 2);
    c.federation.server_lr = 0.7;
    c.federation.server_momentum = 0.9;
    c
}

#[test]
fn resume_after_checkpoint_crash_is_bit_exact() {
    let full = Orchestrator::new(crash_config(6), mem()).unwrap().run_training().unwrap();

    let store = mem();
    let mut c = crash_config(6);
    c.faults.push(FaultSpec::new(FaultKind::ServerCrash, 3, Phase::PostCheckpoint));
    let err = Orchestrator::new(c, store.clone()).unwrap().run_training().err().unwrap();
    assert!(matches!(err, OrchestratorError::ServerCrash { round: 3, .. }));

    let (mut orch, state) = Orchestrator::resume(store.clone()).unwrap();
    assert_eq!(state.round, 3);
    let resumed = orch.continue_training(state).unwrap();
    assert!(resumed.state.global.bit_eq(&full.state.global));
    assert_eq!(resumed.state.server_opt, full.state.server_opt);
    // The metrics archive is rebuilt from checkpoints and matches too.
    assert_eq!(resumed.archive.records(), full.archive.records());
}

#[test]
fn resume_after_mid_round_crash_is_bit_exact() {
    let full = Orchestrator::new(crash_config(5), mem()).unwrap().run_training().unwrap();
    let store = mem();
    let mut c = crash_config(5);
    c.runtime.mode = ExecutionMode::Sequential;
    c.faults.push(FaultSpec::new(FaultKind::ServerCrash, 2, Phase::MidTrain));
    let mut first = Orchestrator::new(c, store.clone()).unwrap();
    assert!(matches!(first.run_training(), Err(OrchestratorError::ServerCrash { round: 2, phase: Phase::MidTrain })));

    let (mut orch, state) = Orchestrator::resume(store.clone()).unwrap();
    assert_eq!(state.round, 2);
    let out = orch.continue_training(state).unwrap();
    assert!(out.state.global.bit_eq(&full.state.global));
    assert_eq!(orch.events().named("publish_reused").count(), 1);
}

#[test]
fn resume_with_empty_store_signals_fresh_start() {
    assert!(matches!(restore_server(&MemoryStore::new()).unwrap(), Restore::Fresh));
    assert!(matches!(Orchestrator::resume(mem()), Err(OrchestratorError::NoCheckpoint)));
}

#[test]
fn second_run_on_same_store_is_refused() {
    let store = mem();
    Orchestrator::new(ExperimentConfig::tiny(2, 1, 1), store.clone()).unwrap().run_training().unwrap();
    let again = Orchestrator::new(ExperimentConfig::tiny(2, 1, 1), store).unwrap().run_training();
    assert!(matches!(again, Err(OrchestratorError::AlreadyStarted(1))));
}

#[test]
fn worker_crash_with_retry_keeps_full_participation() {
    for phase in [Phase::MidTrain, Phase::PostPublish] {
        let mut c = ExperimentConfig::tiny(4, 5, 1);
        c.faults.push(FaultSpec::new(FaultKind::WorkerCrash { client_id: 2 }, 3, phase));
        let reference = Orchestrator::new(ExperimentConfig::tiny(4, 5, 1), mem()).unwrap().run_training().unwrap();
        let mut orch = Orchestrator::new(c, mem()).unwrap();
        let out = orch.run_training().unwrap();
        assert_eq!(contributors_per_round(&orch), vec![4; 5]);
        assert_eq!(orch.events().named("worker_crash").count(), 1);
        assert!(out.state.global.bit_eq(&reference.state.global), "{phase:?}");
    }
}

#[test]
fn worker_crash_without_retry_drops_the_client_for_that_round() {
    let mut c = ExperimentConfig::tiny(4, 5, 1);
    c.federation.worker_retries = 0;
    c.faults.push(FaultSpec::new(FaultKind::WorkerCrash { client_id: 1 }, 3, Phase::MidTrain));
    let mut orch = Orchestrator::new(c, mem()).unwrap();
    orch.run_training().unwrap();
    assert_eq!(contributors_per_round(&orch), vec![4, 4, 4, 3, 4]);
    let round3: Vec<f64> = orch
        .archive()
        .rows(Scope::ClientRound)
        .iter()
        .filter(|r| r.round == 3)
        .map(|r| r.get("weight").unwrap())
        .collect();
    assert_eq!(round3.len(), 3);
    assert!((round3.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn manager_drop_pre_dispatch_and_mid_train() {
    for phase in [Phase::PreDispatch, Phase::PostPublish, Phase::MidTrain] {
        let mut c = ExperimentConfig::tiny(8, 4, 1);
        c.faults.push(FaultSpec::new(FaultKind::NodeManagerDrop { node_manager_id: 5 }, 2, phase));
        let mut orch = Orchestrator::new(c, mem()).unwrap();
        orch.run_training().unwrap();
        assert_eq!(contributors_per_round(&orch), vec![8, 8, 7, 7], "{phase:?}");
        for r in orch.archive().rows(Scope::ClientRound).iter().filter(|r| r.round >= 2) {
            assert_ne!(r.client_id, Some(5));
            assert!((r.get("weight").unwrap() - 1.0 / 7.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn drop_then_join_restores_population() {
    let mut c = ExperimentConfig::tiny(8, 6, 1);
    c.faults.push(FaultSpec::new(FaultKind::NodeManagerDrop { node_manager_id: 3 }, 2, Phase::PreDispatch));
    c.faults.push(FaultSpec::new(FaultKind::NodeManagerJoin { node_manager_id: 30, worker_slots: 1 }, 4, Phase::PreDispatch));
    let mut orch = Orchestrator::new(c, mem()).unwrap();
    let out = orch.run_training().unwrap();
    assert_eq!(contributors_per_round(&orch), vec![8, 8, 7, 7, 8, 8]);
    assert_eq!(out.state.roster.len(), 8);
    assert_eq!(out.state.roster[&30].clients, vec![3]);
}

#[test]
fn join_mid_round_participates_from_next_round() {
    let mut c = ExperimentConfig::tiny(8, 4, 1);
    c.federation.node_managers = Some((0..4).map(|i| NodeManagerState { id: i, worker_slots: 1, clients: vec![i] }).collect());
    for id in 10..14 {
        c.faults.push(FaultSpec::new(FaultKind::NodeManagerJoin { node_manager_id: id, worker_slots: 1 }, 1, Phase::MidTrain));
    }
    let mut orch = Orchestrator::new(c, mem()).unwrap();
    orch.run_training().unwrap();
    assert_eq!(contributors_per_round(&orch), vec![4, 4, 8, 8]);
}

#[test]
fn dropping_every_manager_halts_training() {
    let mut c = ExperimentConfig::tiny(2, 4, 1);
    c.faults.push(FaultSpec::new(FaultKind::NodeManagerDrop { node_manager_id: 0 }, 1, Phase::PreDispatch));
    c.faults.push(FaultSpec::new(FaultKind::NodeManagerDrop { node_manager_id: 1 }, 2, Phase::PreDispatch));
    let err = Orchestrator::new(c, mem()).unwrap().run_training().err().unwrap();
    assert!(matches!(err, OrchestratorError::AllManagersFailed));
}

#[test]
fn liveness_under_any_single_manager_drop() {
    for round in 0..3 {
        for phase in [Phase::PostCheckpoint, Phase::PreDispatch, Phase::PostPublish, Phase::MidTrain] {
            let mut c = ExperimentConfig::tiny(3, 3, 1);
            c.runtime.mode = ExecutionMode::Sequential;
            c.faults.push(FaultSpec::new(FaultKind::NodeManagerDrop { node_manager_id: round as u32 }, round, phase));
            let out = Orchestrator::new(c, mem()).unwrap().run_training().unwrap();
            assert_eq!(out.state.round, 3);
            assert_eq!(out.state.roster.len(), 2);
        }
    }
}

#[test]
fn stragglers_train_fewer_steps_but_keep_their_weight() {
    let mut c = ExperimentConfig::tiny(4, 2, 4);
    c.federation.stragglers.insert(2, 1);
    let mut orch = Orchestrator::new(c, mem()).unwrap();
    let out = orch.run_training().unwrap();
    let steps_of = |client: u32| out.archive.rows(Scope::ClientStep).iter().filter(|r| r.client_id == Some(client)).count();
    assert_eq!(steps_of(2), 2);
    assert_eq!(steps_of(0), 8);
    for r in out.archive.rows(Scope::ClientRound) {
        assert!((r.get("weight").unwrap() - 0.25).abs() <= 1e-12);
    }
    // The straggler's round-1 step continues the nominal schedule.
    let first_step = out.archive.rows(Scope::ClientStep).iter().find(|r| r.client_id == Some(2) && r.round == 1).unwrap().step;
    assert_eq!(first_step, Some(4));
}

#[test]
fn replaying_logged_updates_reproduces_every_global_model() {
    let mut c = ExperimentConfig::tiny(5, 4, 2);
    c.federation.server_lr = 0.7;
    c.federation.server_momentum = 0.9;
    c.faults.push(FaultSpec::new(FaultKind::NodeManagerDrop { node_manager_id: 1 }, 2, Phase::MidTrain));
    let store = mem();
    let mut orch = Orchestrator::new(c, store.clone()).unwrap();
    orch.run_training().unwrap();
    let manifest = orch.trainer().model.manifest().clone();
    for t in 0..4u64 {
        let ckpt = Checkpoint::from_bytes(&store.get(BlobKey::ServerCheckpoint { round: t }).unwrap()).unwrap();
        let next = Checkpoint::from_bytes(&store.get(BlobKey::ServerCheckpoint { round: t + 1 }).unwrap()).unwrap();
        let w = decode_global_blob(&store.get(BlobKey::Global { round: t }).unwrap(), &manifest).unwrap().1;
        assert!(w.bit_eq(&ckpt.vector("global").unwrap()));
        let accepted: Vec<u32> = orch
            .events()
            .named("update_accepted")
            .filter(|e| e.round == t)
            .map(|e| e.detail["client"].as_u64().unwrap() as u32)
            .collect();
        let mut agg = AggregatorState::new(t, w.len(), ReductionMode::Deterministic);
        for client in accepted {
            let blob = decode_client_blob(&store.get(BlobKey::Client { round: t, client }).unwrap()).unwrap();
            agg.accumulate(&blob.update).unwrap();
        }
        let mut opt = ServerOptState::new(0.7, 0.9, true).unwrap();
        opt.momentum = ckpt.optional_vector("momentum").unwrap();
        let (w_next, opt_next) = opt.step(&w, &agg.finalize().unwrap(), t).unwrap();
        assert!(w_next.bit_eq(&next.vector("global").unwrap()), "round {t}");
        assert!(opt_next.momentum.unwrap().bit_eq(&next.vector("momentum").unwrap()));
    }
}

#[test]
fn filesystem_store_run_with_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let store: Arc<dyn BlobStore> = Arc::new(FsStore::open(dir.path().join("blobs")).unwrap());
    let log = dir.path().join("events.jsonl");
    let mut c = ExperimentConfig::tiny(3, 2, 1);
    c.federation.round_deadline_s = Some(600.0);
    let mut orch = Orchestrator::new(c, store).unwrap().with_event_log(&log).unwrap();
    orch.run_training().unwrap();
    assert!(dir.path().join("blobs/round-1/client-2").is_file());
    assert!(dir.path().join("blobs/ckpt/server-2").is_file());
    let events = fedforge::orchestrator::EventLog::read_jsonl(&log).unwrap();
    let names: Vec<&str> = events.iter().map(|e| e.event.as_str()).collect();
    for expected in ["start", "publish", "dispatch", "heartbeat", "update_accepted", "aggregate", "checkpoint", "complete"] {
        assert!(names.contains(&expected), "{expected}");
    }
    assert_eq!(events.len(), orch.events().events().len());
}
