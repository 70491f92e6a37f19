use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    ServerRound,
    ClientStep,
    ClientRound,
    Eval,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::ServerRound, Scope::ClientStep, Scope::ClientRound, Scope::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::ServerRound => "server_round",
            Scope::ClientStep => "client_step",
            Scope::ClientRound => "client_round",
            Scope::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Scope> {
        Scope::ALL.into_iter().find(|sc| sc.as_str() == s)
    }
}

/// Scalar columns in export order. Records may only use these names.
pub const COLUMNS: [&str; 16] = [
    "loss",
    "perplexity",
    "lr",
    "grad_norm_raw",
    "grad_norm_applied",
    "pseudograd_norm",
    "global_norm",
    "avg_client_norm",
    "momentum_norm",
    "param_norm",
    "contributors",
    "weight_sum",
    "weight",
    "n_k",
    "delta_norm",
    "local_steps",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scope: Scope,
    pub round: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    pub values: BTreeMap<String, f64>,
}

type Key = (Scope, u64, Option<u32>, Option<u64>);

impl MetricsRecord {
    pub fn new(scope: Scope, round: u64) -> Self {
        Self { scope, round, client_id: None, step: None, values: BTreeMap::new() }
    }

    pub fn client(mut self, id: u32) -> Self {
        self.client_id = Some(id);
        self
    }

    pub fn at_step(mut self, step: u64) -> Self {
        self.step = Some(step);
        self
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    fn key(&self) -> Key {
        (self.scope, self.round, self.client_id, self.step)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("duplicate record {scope:?} round={round} client={client_id:?} step={step:?}")]
    Duplicate { scope: Scope, round: u64, client_id: Option<u32>, step: Option<u64> },
    #[error("metric {name:?} is not finite: {value}")]
    NonFinite { name: String, value: f64 },
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("metrics file line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("metrics i/o: {0}")]
    Io(#[from] io::Error),
}

/// Append-only collection of metric records with unique keys.
#[derive(Clone, Debug, Default)]
pub struct Archive {
    records: Vec<MetricsRecord>,
    keys: BTreeSet<Key>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, rec: MetricsRecord) -> Result<(), ArchiveError> {
        for (name, &value) in &rec.values {
            if !COLUMNS.contains(&name.as_str()) {
                return Err(ArchiveError::UnknownMetric(name.clone()));
            }
            if !value.is_finite() {
                return Err(ArchiveError::NonFinite { name: name.clone(), value });
            }
        }
        let key = rec.key();
        if self.keys.contains(&key) {
            return Err(ArchiveError::Duplicate { scope: key.0, round: key.1, client_id: key.2, step: key.3 });
        }
        self.keys.insert(key);
        self.records.push(rec);
        Ok(())
    }

    pub fn extend(&mut self, recs: impl IntoIterator<Item = MetricsRecord>) -> Result<(), ArchiveError> {
        recs.into_iter().try_for_each(|r| self.record(r))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    /// Records of one scope sorted by `(round, client_id, step)`.
    pub fn rows(&self, scope: Scope) -> Vec<&MetricsRecord> {
        let mut rows: Vec<&MetricsRecord> = self.records.iter().filter(|r| r.scope == scope).collect();
        rows.sort_by_key(|r| (r.round, r.client_id, r.step));
        rows
    }

    /// Drops everything recorded for rounds at or after `round`, keeping the
    /// evaluation of the model that round `round` starts from.
    pub fn truncate_from(&mut self, round: u64) {
        self.records.retain(|r| r.round < round || (r.scope == Scope::Eval && r.round == round));
        self.keys = self.records.iter().map(MetricsRecord::key).collect();
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ArchiveError> {
        let mut archive = Archive::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec = serde_json::from_str(line).map_err(|source| ArchiveError::Parse { line: i + 1, source })?;
            archive.record(rec)?;
        }
        Ok(archive)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), ArchiveError> {
        Ok(fs::write(path, self.to_jsonl())?)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, ArchiveError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    /// CSV for one scope: a fixed header, then one row per record. Missing
    /// values are empty cells. The output depends only on the archive.
    pub fn csv(&self, scope: Scope) -> String {
        let mut out = String::from("scope,round,client_id,step");
        for c in COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in self.rows(scope) {
            let _ = write!(out, "{},{}", scope.as_str(), r.round);
            out.push(',');
            if let Some(c) = r.client_id {
                let _ = write!(out, "{c}");
            }
            out.push(',');
            if let Some(s) = r.step {
                let _ = write!(out, "{s}");
            }
            for c in COLUMNS {
                out.push(',');
                if let Some(v) = r.values.get(c) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn export_csv(&self, scope: Scope, path: &Path) -> Result<(), ArchiveError> {
        Ok(fs::write(path, self.csv(scope))?)
    }
}
