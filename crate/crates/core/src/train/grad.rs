//! Gradient post-processing: global-norm clipping and micro-batch accumulation.

use super::TrainError;
use crate::params::{checked_l2_norm, ParamVector};

/// Scales `g` so its global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad(g: &ParamVector, max_norm: f64) -> Result<(ParamVector, f64), TrainError> {
    if !(max_norm > 0.0) {
        return Err(TrainError::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let raw = checked_l2_norm(g.as_slice())?;
    if raw > max_norm {
        Ok((g.scale(max_norm / raw)?, raw))
    } else {
        Ok((g.clone(), raw))
    }
}

/// Running sum of micro-batch gradients.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(len: usize) -> Self {
        Self { sum: vec![0.0; len], count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn accumulate<F: super::ops::Scalar>(&mut self, g_micro: &[F]) -> Result<(), TrainError> {
        if g_micro.len() != self.sum.len() {
            return Err(TrainError::LengthMismatch { expected: self.sum.len(), got: g_micro.len() });
        }
        for (s, &g) in self.sum.iter_mut().zip(g_micro) {
            *s += g.to_f64();
        }
        self.count += 1;
        Ok(())
    }

    /// Mean over the accumulated micro-batches.
    pub fn finalize(&self) -> Result<ParamVector, TrainError> {
        if self.count == 0 {
            return Err(TrainError::Config("no micro-batch gradients accumulated".into()));
        }
        let inv = 1.0 / self.count as f64;
        Ok(ParamVector::new(self.sum.iter().map(|&s| (s * inv) as f32).collect())?)
    }
}
