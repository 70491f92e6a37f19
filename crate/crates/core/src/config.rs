//! Experiment configuration: one JSON document describing the model, the
//! local optimizer, the federation, the data and the runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{synth_corpus, tokenize_bytes, Structure, TokenizedCorpus, BYTE_VOCAB};
use crate::fedopt::ReductionMode;
use crate::orchestrator::{FaultKind, FaultSpec, NodeManagerState};
use crate::train::{AdamWConfig, ScheduleConfig, TinyLMConfig, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub model: TinyLMConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub adamw: AdamWConfig,
    pub local: LocalConfig,
    pub federation: FederationConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Rows per forward/backward pass; defaults to the whole batch.
    #[serde(default)]
    pub micro_batch_size: Option<usize>,
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: f64,
}

fn default_max_grad_norm() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: u32,
    pub rounds: u64,
    pub local_steps: u64,
    pub server_lr: f64,
    pub server_momentum: f64,
    #[serde(default = "yes")]
    pub nesterov: bool,
    #[serde(default)]
    pub sampler_seed: u64,
    /// Fraction of the available clients sampled each round.
    #[serde(default = "one")]
    pub participation: f64,
    /// Reduced local step counts for designated slow clients.
    #[serde(default)]
    pub stragglers: BTreeMap<u32, u64>,
    /// Initial roster; defaults to one single-slot manager per client.
    #[serde(default)]
    pub node_managers: Option<Vec<NodeManagerState>>,
    /// Times a crashed worker's task is re-run before its client is dropped
    /// from the round.
    #[serde(default = "one_retry")]
    pub worker_retries: u32,
    /// Seconds the server waits for updates before finalizing over whatever
    /// arrived. Unset means wait for every surviving client.
    #[serde(default)]
    pub round_deadline_s: Option<f64>,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

fn one_retry() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: CorpusSource,
    /// Tokens per sample; a sample yields `seq_len - 1` prediction positions.
    pub seq_len: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Seed for the validation split, the shard partition and batch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Caps the number of validation samples scored per evaluation.
    #[serde(default)]
    pub eval_samples: Option<usize>,
}

fn default_validation_fraction() -> f64 {
    0.1
}

fn default_eval_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic { structure: Structure, n_bytes: usize, seed: u64 },
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Each node manager and each worker slot is an OS thread.
    #[default]
    Threads,
    /// Tasks run one after another on the server thread, in an order
    /// shuffled by `arrival_seed`.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    #[serde(default)]
    pub mode: ExecutionMode,
    /// Filesystem blob store root; the in-memory store is used when unset.
    #[serde(default)]
    pub blob_root: Option<PathBuf>,
    /// Order-independent (tree) reduction of client updates.
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub arrival_seed: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { mode: ExecutionMode::default(), blob_root: None, deterministic: true, arrival_seed: 0 }
    }
}

impl RuntimeConfig {
    pub fn reduction_mode(&self) -> ReductionMode {
        if self.deterministic {
            ReductionMode::Deterministic
        } else {
            ReductionMode::Streaming
        }
    }
}

/// A configuration problem located by its field path, e.g.
/// `federation.local_steps`.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.to_string(), message: message.into() }
}

/// Locates a sub-config validation error by the field its message opens with.
fn section_err(section: &str, e: TrainError) -> ConfigError {
    let TrainError::Config(message) = e else {
        return err(section, e.to_string());
    };
    let field: String = message.chars().take_while(|c| c.is_ascii_lowercase() || *c == '_' || c.is_ascii_digit()).collect();
    if !field.is_empty() && message[field.len()..].starts_with(' ') {
        err(&format!("{section}.{field}"), message)
    } else {
        err(section, message)
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        err(&path, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| section_err("model", e))?;
        if self.model.vocab_size < BYTE_VOCAB {
            return Err(err("model.vocab_size", format!("byte-level data needs at least {BYTE_VOCAB} tokens")));
        }
        self.schedule.validate().map_err(|e| section_err("schedule", e))?;
        self.adamw.validate().map_err(|e| section_err("adamw", e))?;

        let local = &self.local;
        if local.batch_size == 0 {
            return Err(err("local.batch_size", "must be positive"));
        }
        if let Some(mb) = local.micro_batch_size {
            if mb == 0 || local.batch_size % mb != 0 {
                return Err(err("local.micro_batch_size", format!("must divide batch_size {}", local.batch_size)));
            }
        }
        if !(local.max_grad_norm > 0.0 && local.max_grad_norm.is_finite()) {
            return Err(err("local.max_grad_norm", "must be positive and finite"));
        }

        let fed = &self.federation;
        if fed.n_clients == 0 {
            return Err(err("federation.n_clients", "must be positive"));
        }
        if fed.local_steps == 0 {
            return Err(err("federation.local_steps", "must be positive"));
        }
        if !(fed.server_lr > 0.0 && fed.server_lr.is_finite()) {
            return Err(err("federation.server_lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&fed.server_momentum) {
            return Err(err("federation.server_momentum", "must be in [0, 1)"));
        }
        if !(fed.participation > 0.0 && fed.participation <= 1.0) {
            return Err(err("federation.participation", "must be in (0, 1]"));
        }
        for (&client, &steps) in &fed.stragglers {
            let path = format!("federation.stragglers.{client}");
            if client >= fed.n_clients {
                return Err(err(&path, format!("no such client; n_clients is {}", fed.n_clients)));
            }
            if steps == 0 || steps > fed.local_steps {
                return Err(err(&path, format!("local steps must be in 1..={}", fed.local_steps)));
            }
        }
        if let Some(d) = fed.round_deadline_s {
            if !(d > 0.0 && d.is_finite()) {
                return Err(err("federation.round_deadline_s", "must be positive"));
            }
        }
        if let Some(managers) = &fed.node_managers {
            if managers.is_empty() {
                return Err(err("federation.node_managers", "roster must not be empty"));
            }
            let mut seen_ids = std::collections::BTreeSet::new();
            let mut seen_clients = std::collections::BTreeSet::new();
            for (i, nm) in managers.iter().enumerate() {
                let path = format!("federation.node_managers[{i}]");
                if nm.worker_slots == 0 {
                    return Err(err(&path, "worker_slots must be positive"));
                }
                if !seen_ids.insert(nm.id) {
                    return Err(err(&path, format!("duplicate node manager id {}", nm.id)));
                }
                for &c in &nm.clients {
                    if c >= fed.n_clients || !seen_clients.insert(c) {
                        return Err(err(&path, format!("client {c} is unknown or hosted twice")));
                    }
                }
            }
        }

        let data = &self.data;
        if data.seq_len < 2 || data.seq_len - 1 > self.model.context_len {
            return Err(err(
                "data.seq_len",
                format!("must be in 2..={} for context_len {}", self.model.context_len + 1, self.model.context_len),
            ));
        }
        if !(0.0..1.0).contains(&data.validation_fraction) || data.validation_fraction == 0.0 {
            return Err(err("data.validation_fraction", "must be in (0, 1)"));
        }
        if data.eval_batch_size == 0 {
            return Err(err("data.eval_batch_size", "must be positive"));
        }
        if data.eval_samples == Some(0) {
            return Err(err("data.eval_samples", "must be positive when set"));
        }
        if let CorpusSource::Synthetic { n_bytes, .. } = data.source {
            if n_bytes < data.seq_len {
                return Err(err("data.source.n_bytes", "shorter than one sample"));
            }
        }

        for (i, fault) in self.faults.iter().enumerate() {
            if let FaultKind::NodeManagerJoin { worker_slots: 0, .. } = fault.kind {
                return Err(err(&format!("faults[{i}].kind.worker_slots"), "must be positive"));
            }
        }
        Ok(())
    }

    /// The roster training starts from.
    pub fn initial_roster(&self) -> Vec<NodeManagerState> {
        match &self.federation.node_managers {
            Some(managers) => managers.clone(),
            None => (0..self.federation.n_clients)
                .map(|c| NodeManagerState { id: c, worker_slots: 1, clients: vec![c] })
                .collect(),
        }
    }

    pub fn micro_batch_size(&self) -> usize {
        self.local.micro_batch_size.unwrap_or(self.local.batch_size)
    }

    /// Local steps for `client` in every round.
    pub fn local_steps_for(&self, client: u32) -> u64 {
        self.federation.stragglers.get(&client).copied().unwrap_or(self.federation.local_steps)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_corpus(&self) -> Result<TokenizedCorpus, ConfigError> {
        let bytes = match &self.data.source {
            CorpusSource::Synthetic { structure, n_bytes, seed } => synth_corpus(*seed, *n_bytes, *structure),
            CorpusSource::File { path } => std::fs::read(path)
                .map_err(|e| err("data.source.path", format!("cannot read {}: {e}", path.display())))?,
        };
        tokenize_bytes(&bytes, self.data.seq_len).map_err(|e| err("data", e.to_string()))
    }

    /// A small configuration that trains in seconds.
    pub fn tiny(n_clients: u32, rounds: u64, local_steps: u64) -> Self {
        ExperimentConfig {
            name: "tiny".into(),
            model: TinyLMConfig { context_len: 16, d_model: 16, n_heads: 2, n_layers: 1, ..TinyLMConfig::default() },
            schedule: ScheduleConfig { base_lr: 3e-3, warmup_steps: 2, t_max: rounds.max(1) * local_steps + 2, alpha_f: 0.1 },
            adamw: AdamWConfig::default(),
            local: LocalConfig { batch_size: 4, micro_batch_size: None, max_grad_norm: 1.0 },
            federation: FederationConfig {
                n_clients,
                rounds,
                local_steps,
                server_lr: 1.0,
                server_momentum: 0.0,
                nesterov: true,
                sampler_seed: 0,
                participation: 1.0,
                stragglers: BTreeMap::new(),
                node_managers: None,
                worker_retries: 1,
                round_deadline_s: None,
            },
            data: DataConfig {
                source: CorpusSource::Synthetic { structure: Structure::Markov, n_bytes: 40_000, seed: 7 },
                seq_len: 17,
                validation_fraction: 0.1,
                seed: 1,
                eval_batch_size: 32,
                eval_samples: Some(64),
            },
            runtime: RuntimeConfig::default(),
            faults: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn json_of(c: &ExperimentConfig) -> serde_json::Value {
        serde_json::to_value(c).unwrap()
    }

    #[test]
    fn tiny_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::tiny(4, 3, 2);
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), c);
    }

    #[test]
    fn negative_local_steps_names_the_field() {
        let mut v = json_of(&ExperimentConfig::tiny(2, 1, 1));
        v["federation"]["local_steps"] = serde_json::json!(-5);
        let e = parse_config_str(&v.to_string()).unwrap_err();
        assert_eq!(e.path, "federation.local_steps");
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let mut v = json_of(&ExperimentConfig::tiny(2, 1, 1));
        v["local"]["learning_rate"] = serde_json::json!(0.1);
        let e = parse_config_str(&v.to_string()).unwrap_err();
        assert_eq!(e.path, "local.learning_rate");
        assert!(e.message.contains("learning_rate"), "{e}");
    }

    #[test]
    fn semantic_errors_carry_paths() {
        let mut c = ExperimentConfig::tiny(2, 1, 1);
        c.federation.local_steps = 0;
        assert_eq!(c.validate().unwrap_err().path, "federation.local_steps");
        let mut c = ExperimentConfig::tiny(2, 1, 1);
        c.data.seq_len = 40;
        assert_eq!(c.validate().unwrap_err().path, "data.seq_len");
        let mut c = ExperimentConfig::tiny(2, 1, 4);
        c.federation.stragglers.insert(5, 1);
        assert_eq!(c.validate().unwrap_err().path, "federation.stragglers.5");
    }

    #[test]
    fn nested_section_errors_name_the_field() {
        let cases: [(&str, fn(&mut ExperimentConfig)); 4] = [
            ("schedule.base_lr", |c| c.schedule.base_lr = f64::NAN),
            ("schedule.alpha_f", |c| c.schedule.alpha_f = 2.0),
            ("adamw.beta2", |c| c.adamw.beta2 = 1.0),
            ("model.n_heads", |c| c.model.n_heads = 0),
        ];
        for (path, breaks) in cases {
            let mut c = ExperimentConfig::tiny(2, 1, 1);
            breaks(&mut c);
            assert_eq!(c.validate().unwrap_err().path, path);
        }
    }

    #[test]
    fn zero_rounds_is_allowed() {
        ExperimentConfig::tiny(2, 0, 1).validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::tiny(2, 1, 1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.federation.sampler_seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn default_roster_is_one_manager_per_client() {
        let c = ExperimentConfig::tiny(3, 1, 1);
        let roster = c.initial_roster();
        assert_eq!(roster.len(), 3);
        assert!(roster.iter().all(|nm| nm.worker_slots == 1 && nm.clients == vec![nm.id]));
    }
}
