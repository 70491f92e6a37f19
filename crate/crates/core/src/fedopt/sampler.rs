use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FedOptError;
use crate::seed::mix;

/// Client sampler. Selection is a pure function of `(seed, round, pool)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub round: u64,
    pub fraction: f64,
}

impl SamplerState {
    pub fn new(seed: u64, fraction: f64) -> Result<Self, FedOptError> {
        let s = Self { seed, round: 0, fraction };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), FedOptError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(FedOptError::InvalidFraction(self.fraction));
        }
        Ok(())
    }

    /// Selects the round's participants, returned in ascending id order.
    pub fn sample(&self, pool: &[u32]) -> Result<Vec<u32>, FedOptError> {
        self.validate()?;
        if pool.is_empty() {
            return Err(FedOptError::EmptyPool);
        }
        let mut canonical = pool.to_vec();
        canonical.sort_unstable();
        canonical.dedup();
        if self.fraction >= 1.0 {
            return Ok(canonical);
        }
        let k = ((self.fraction * canonical.len() as f64).ceil() as usize).clamp(1, canonical.len());
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, self.round));
        let mut chosen: Vec<u32> = canonical.choose_multiple(&mut rng, k).copied().collect();
        chosen.sort_unstable();
        Ok(chosen)
    }
}
