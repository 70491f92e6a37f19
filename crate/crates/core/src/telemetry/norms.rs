use crate::params::{ParamError, ParamVector};

#[derive(Clone, Debug, PartialEq)]
pub struct RoundNorms {
    pub global_norm: f64,
    pub client_norms: Vec<f64>,
    /// Norm of the weighted average of the client models, not the average of
    /// their norms.
    pub avg_client_norm: f64,
    pub momentum_norm: f64,
    /// `||w_global - avg client model||`, the pseudo-gradient norm.
    pub pseudograd_norm: f64,
}

/// Norms for one round from the broadcast model, the weighted client models
/// (weights need not be normalized) and the server momentum.
pub fn compute_round_norms(
    w_global: &ParamVector,
    clients: &[(f64, &ParamVector)],
    momentum: Option<&ParamVector>,
) -> Result<RoundNorms, ParamError> {
    if clients.is_empty() {
        return Err(ParamError::Empty);
    }
    let n = w_global.len();
    let total: f64 = clients.iter().map(|(w, _)| w).sum();
    if !(total > 0.0) {
        return Err(ParamError::Layout(format!("client weights sum to {total}")));
    }
    let mut avg = vec![0f64; n];
    let mut client_norms = Vec::with_capacity(clients.len());
    for &(weight, model) in clients {
        w_global.check_len(model)?;
        let p = weight / total;
        for (a, &x) in avg.iter_mut().zip(model.as_slice()) {
            *a += p * x as f64;
        }
        client_norms.push(model.l2_norm());
    }
    let momentum_norm = match momentum {
        Some(m) => {
            w_global.check_len(m)?;
            m.l2_norm()
        }
        None => 0.0,
    };
    let pseudo: Vec<f64> = w_global.as_slice().iter().zip(&avg).map(|(&w, &a)| w as f64 - a).collect();
    Ok(RoundNorms {
        global_norm: w_global.l2_norm(),
        client_norms,
        avg_client_norm: norm64(&avg),
        momentum_norm,
        pseudograd_norm: norm64(&pseudo),
    })
}

fn norm64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
