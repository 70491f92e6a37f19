use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::FedOptError;
use crate::params::ParamVector;

/// Weight `p_k = n_k / n` of one client in the global objective.
pub fn client_weight(n_k: u64, n_total: u64) -> Result<f64, FedOptError> {
    if n_total == 0 {
        return Err(FedOptError::ZeroTotal);
    }
    if n_k == 0 || n_k > n_total {
        return Err(FedOptError::InvalidCount { n_k, n_total });
    }
    Ok(n_k as f64 / n_total as f64)
}

/// One client's contribution to a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u64,
    /// Number of training samples in the client's shard.
    pub n_k: u64,
    /// `w_prev - w_client` for the round's starting model `w_prev`.
    pub delta: ParamVector,
    pub local_metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMode {
    /// Fold each update into a running sum as it arrives.
    #[default]
    Streaming,
    /// Hold updates and reduce them as a pairwise tree in client-id order, so
    /// the result does not depend on arrival order.
    Deterministic,
}

/// Partial aggregate of the client updates for one round.
///
/// Sums are kept in `f64`: the products `n_k * delta_i` are exact there, so a
/// single contributor finalizes to exactly its own delta.
#[derive(Clone, Debug)]
pub struct AggregatorState {
    round: u64,
    len: usize,
    mode: ReductionMode,
    weighted_sum: Vec<f64>,
    held: BTreeMap<u32, (u64, ParamVector)>,
    total_weight: u64,
    contributors: BTreeSet<u32>,
}

impl AggregatorState {
    pub fn new(round: u64, len: usize, mode: ReductionMode) -> Self {
        let weighted_sum = match mode {
            ReductionMode::Streaming => vec![0.0; len],
            ReductionMode::Deterministic => Vec::new(),
        };
        Self {
            round,
            len,
            mode,
            weighted_sum,
            held: BTreeMap::new(),
            total_weight: 0,
            contributors: BTreeSet::new(),
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn mode(&self) -> ReductionMode {
        self.mode
    }

    pub fn total_weight(&self) -> u64 {
        self.total_weight
    }

    pub fn contributors(&self) -> &BTreeSet<u32> {
        &self.contributors
    }

    pub fn is_empty(&self) -> bool {
        self.contributors.is_empty()
    }

    /// `Σ n_k · delta_k` so far, in `f64`.
    pub fn weighted_sum(&self) -> Vec<f64> {
        match self.mode {
            ReductionMode::Streaming => self.weighted_sum.clone(),
            ReductionMode::Deterministic => self.tree_sum(),
        }
    }

    pub fn accumulate(&mut self, update: &ClientUpdate) -> Result<(), FedOptError> {
        if update.round != self.round {
            return Err(FedOptError::RoundMismatch { expected: self.round, got: update.round });
        }
        if self.contributors.contains(&update.client_id) {
            return Err(FedOptError::DuplicateContributor { client: update.client_id, round: self.round });
        }
        if update.delta.len() != self.len {
            return Err(FedOptError::LengthMismatch { expected: self.len, got: update.delta.len() });
        }
        if update.n_k == 0 {
            return Err(FedOptError::InvalidCount { n_k: 0, n_total: self.total_weight });
        }
        match self.mode {
            ReductionMode::Streaming => {
                let w = update.n_k as f64;
                for (acc, &d) in self.weighted_sum.iter_mut().zip(update.delta.as_slice()) {
                    *acc += w * d as f64;
                }
            }
            ReductionMode::Deterministic => {
                self.held.insert(update.client_id, (update.n_k, update.delta.clone()));
            }
        }
        self.total_weight += update.n_k;
        self.contributors.insert(update.client_id);
        Ok(())
    }

    /// Combines two partial aggregates over disjoint client sets.
    pub fn merge(mut self, other: AggregatorState) -> Result<AggregatorState, FedOptError> {
        if self.round != other.round {
            return Err(FedOptError::RoundMismatch { expected: self.round, got: other.round });
        }
        if self.mode != other.mode {
            return Err(FedOptError::Merge("reduction modes differ".into()));
        }
        if self.len != other.len {
            return Err(FedOptError::LengthMismatch { expected: self.len, got: other.len });
        }
        if let Some(&client) = self.contributors.intersection(&other.contributors).next() {
            return Err(FedOptError::DuplicateContributor { client, round: self.round });
        }
        match self.mode {
            ReductionMode::Streaming => {
                for (a, b) in self.weighted_sum.iter_mut().zip(&other.weighted_sum) {
                    *a += b;
                }
            }
            ReductionMode::Deterministic => self.held.extend(other.held),
        }
        self.total_weight += other.total_weight;
        self.contributors.extend(other.contributors);
        Ok(self)
    }

    /// The pseudo-gradient `Σ p_k · delta_k` with `p_k = n_k / Σ n_k`.
    pub fn finalize(&self) -> Result<ParamVector, FedOptError> {
        if self.contributors.is_empty() {
            return Err(FedOptError::Empty);
        }
        let total = self.total_weight as f64;
        let sum = self.weighted_sum();
        let mean: Vec<f32> = sum.iter().map(|&s| (s / total) as f32).collect();
        Ok(ParamVector::new(mean)?)
    }

    fn tree_sum(&self) -> Vec<f64> {
        // BTreeMap iteration is already in client-id order.
        let mut level: Vec<Vec<f64>> = self
            .held
            .values()
            .map(|(n_k, d)| {
                let w = *n_k as f64;
                d.as_slice().iter().map(|&x| w * x as f64).collect()
            })
            .collect();
        if level.is_empty() {
            return vec![0.0; self.len];
        }
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(2));
            let mut it = level.into_iter();
            while let Some(mut left) = it.next() {
                if let Some(right) = it.next() {
                    for (a, b) in left.iter_mut().zip(&right) {
                        *a += b;
                    }
                }
                next.push(left);
            }
            level = next;
        }
        level.pop().unwrap()
    }
}
