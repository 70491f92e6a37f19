use serde::{Deserialize, Serialize};

/// Points inside a round where faults can fire, in timeline order. The
/// boundary phase `PostCheckpoint` of round `t` comes right after the
/// checkpoint holding round `t`'s starting state is written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PostCheckpoint,
    PreDispatch,
    PostPublish,
    MidTrain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultKind {
    /// The worker training `client_id` dies. At `post_publish` it dies after
    /// uploading its update but before announcing it; at any other phase it
    /// dies before uploading.
    WorkerCrash { client_id: u32 },
    NodeManagerDrop { node_manager_id: u32 },
    ServerCrash,
    /// A new manager joins and adopts unhosted clients, one per slot.
    NodeManagerJoin { node_manager_id: u32, worker_slots: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub round: u64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub trigger: Trigger,
}

impl FaultSpec {
    pub fn new(kind: FaultKind, round: u64, phase: Phase) -> Self {
        Self { kind, trigger: Trigger { round, phase } }
    }
}

/// Pending faults; each fires at most once.
#[derive(Clone, Debug, Default)]
pub struct FaultPlan {
    pending: Vec<(FaultSpec, bool)>,
}

impl FaultPlan {
    pub fn new(specs: impl IntoIterator<Item = FaultSpec>) -> Self {
        Self { pending: specs.into_iter().map(|s| (s, false)).collect() }
    }

    /// The faults still ahead when restarting from the checkpoint of round
    /// `round`. Everything at that round is replayed because the checkpoint
    /// predates it, except server crashes, which are what caused the
    /// restart.
    pub fn for_resume(specs: impl IntoIterator<Item = FaultSpec>, round: u64) -> Self {
        Self::new(specs.into_iter().filter(|s| match s.kind {
            FaultKind::ServerCrash => s.trigger.round > round,
            _ => s.trigger.round >= round,
        }))
    }

    pub fn inject(&mut self, spec: FaultSpec) {
        self.pending.push((spec, false));
    }

    /// Marks and returns the faults due at `(round, phase)`, excluding worker
    /// crashes.
    pub fn take(&mut self, round: u64, phase: Phase) -> Vec<FaultSpec> {
        self.take_where(|s| {
            s.trigger == Trigger { round, phase } && !matches!(s.kind, FaultKind::WorkerCrash { .. })
        })
    }

    /// Marks and returns this round's worker crashes as `(client, phase)`.
    pub fn take_worker_crashes(&mut self, round: u64) -> Vec<(u32, Phase)> {
        self.take_where(|s| s.trigger.round == round && matches!(s.kind, FaultKind::WorkerCrash { .. }))
            .into_iter()
            .filter_map(|s| match s.kind {
                FaultKind::WorkerCrash { client_id } => Some((client_id, s.trigger.phase)),
                _ => None,
            })
            .collect()
    }

    pub fn unfired(&self) -> impl Iterator<Item = &FaultSpec> {
        self.pending.iter().filter(|(_, fired)| !fired).map(|(s, _)| s)
    }

    fn take_where(&mut self, pred: impl Fn(&FaultSpec) -> bool) -> Vec<FaultSpec> {
        let mut out = Vec::new();
        for (spec, fired) in &mut self.pending {
            if !*fired && pred(spec) {
                *fired = true;
                out.push(spec.clone());
            }
        }
        out
    }
}
