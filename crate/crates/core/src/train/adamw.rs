use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::params::{ParamError, ParamVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 1e-5 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("beta1 must be in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("beta2 must be in [0, 1), got {}", self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// AdamW moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m1: Vec<f32>,
    m2: Vec<f32>,
    step_count: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        Self { config, m1: vec![0.0; len], m2: vec![0.0; len], step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f32] {
        &self.m1
    }

    pub fn second_moment(&self) -> &[f32] {
        &self.m2
    }

    /// Zeroes both moments and the step counter; hyperparameters stay.
    pub fn reset(&mut self) {
        self.m1.fill(0.0);
        self.m2.fill(0.0);
        self.step_count = 0;
    }

    /// One update `p' = p - lr * (m̂ / (sqrt(v̂) + eps) + wd * p)`.
    ///
    /// Returns the new parameters and the norm of the applied update.
    pub fn step(&mut self, params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<(ParamVector, f64), TrainError> {
        params.check_len(grad)?;
        if params.len() != self.m1.len() {
            return Err(TrainError::LengthMismatch { expected: self.m1.len(), got: params.len() });
        }
        let c = &self.config;
        let t = self.step_count + 1;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let mut out = Vec::with_capacity(params.len());
        let mut sq = 0f64;
        for (i, (&p, &g)) in params.as_slice().iter().zip(grad.as_slice()).enumerate() {
            let g = g as f64;
            let m = (c.beta1 * self.m1[i] as f64 + (1.0 - c.beta1) * g) as f32;
            let v = (c.beta2 * self.m2[i] as f64 + (1.0 - c.beta2) * g * g) as f32;
            self.m1[i] = m;
            self.m2[i] = v;
            let m_hat = m as f64 / bc1;
            let v_hat = v as f64 / bc2;
            let u = lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p as f64);
            sq += u * u;
            out.push((p as f64 - u) as f32);
        }
        self.step_count = t;
        let next = ParamVector::new(out).map_err(|e| match e {
            ParamError::NonFinite { index, value } => TrainError::NonFiniteUpdate { index, value },
            other => other.into(),
        })?;
        Ok((next, sq.sqrt()))
    }
}
