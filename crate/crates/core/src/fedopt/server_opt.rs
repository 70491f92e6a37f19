use super::FedOptError;
use crate::params::ParamVector;

/// Server optimizer: momentum on the pseudo-gradient stream.
///
/// ```text
/// m' = mu * m + delta
/// nesterov:  w' = w - eta * (mu * m' + delta)
/// plain:     w' = w - eta * m'
/// ```
///
/// With `mu = 0` both forms reduce to `w' = w - eta * delta`, and with
/// `eta = 1` that is plain FedAvg. Arithmetic is per element in `f64`; the
/// momentum buffer is rounded to `f32` before it feeds the parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerOptState {
    /// `None` until the first step; equivalent to a zero buffer.
    pub momentum: Option<ParamVector>,
    pub eta: f64,
    pub mu: f64,
    pub nesterov: bool,
}

impl ServerOptState {
    pub fn new(eta: f64, mu: f64, nesterov: bool) -> Result<Self, FedOptError> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(FedOptError::InvalidHyper(format!("server eta must be > 0, got {eta}")));
        }
        if !(0.0..1.0).contains(&mu) {
            return Err(FedOptError::InvalidHyper(format!("server mu must be in [0, 1), got {mu}")));
        }
        Ok(Self { momentum: None, eta, mu, nesterov })
    }

    pub fn momentum_norm(&self) -> f64 {
        self.momentum.as_ref().map_or(0.0, ParamVector::l2_norm)
    }

    /// Applies one server step and returns the new global parameters.
    pub fn step(
        &self,
        w_prev: &ParamVector,
        delta: &ParamVector,
        round: u64,
    ) -> Result<(ParamVector, ServerOptState), FedOptError> {
        w_prev.check_len(delta)?;
        if let Some(m) = &self.momentum {
            w_prev.check_len(m)?;
        }
        let n = w_prev.len();
        let mut m_new = Vec::with_capacity(n);
        let mut w_new = Vec::with_capacity(n);
        let prev_m = self.momentum.as_ref().map(ParamVector::as_slice);
        for i in 0..n {
            let d = delta.as_slice()[i] as f64;
            let m_old = prev_m.map_or(0.0, |m| m[i] as f64);
            let m = (self.mu * m_old + d) as f32;
            let dir = if self.nesterov { self.mu * m as f64 + d } else { m as f64 };
            m_new.push(m);
            w_new.push((w_prev.as_slice()[i] as f64 - self.eta * dir) as f32);
        }
        let non_finite = |source| FedOptError::NonFinite { round, source };
        let w = ParamVector::new(w_new).map_err(non_finite)?;
        let m = ParamVector::new(m_new).map_err(non_finite)?;
        Ok((w, ServerOptState { momentum: Some(m), ..self.clone() }))
    }
}
