use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::adamw::{AdamWConfig, AdamWState};
use super::grad::{clip_grad, GradAccumulator};
use super::model::TinyLM;
use super::schedule::ScheduleConfig;
use super::TrainError;
use crate::data::{BatchIterator, TokenBatch, TokenizedCorpus};
use crate::fedopt::ClientUpdate;
use crate::params::ParamVector;

/// What one client must do in one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTask {
    pub client_id: u32,
    pub round: u64,
    pub local_steps: u64,
    /// Global index of the round's first step; drives both the learning-rate
    /// schedule and the position in the client's data stream.
    pub schedule_offset: u64,
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: u64,
    pub loss: f64,
    pub grad_norm_raw: f64,
    pub grad_norm_applied: f64,
    pub lr: f64,
    pub param_norm: f64,
}

#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub update: ClientUpdate,
    pub telemetry: Vec<StepTelemetry>,
    /// `w_received - delta`: the client model exactly as the server will
    /// reconstruct it from the transmitted delta.
    pub final_params: ParamVector,
}

/// Local optimization pipeline shared by federated clients and the
/// centralized baseline.
#[derive(Clone, Debug)]
pub struct LocalTrainer {
    pub model: TinyLM,
    pub adamw: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub max_grad_norm: f64,
    /// Rows per micro-batch; the step gradient is the mean over micro-batches.
    pub micro_batch_size: usize,
}

impl LocalTrainer {
    pub fn new(
        model: TinyLM,
        adamw: AdamWConfig,
        schedule: ScheduleConfig,
        max_grad_norm: f64,
        micro_batch_size: usize,
    ) -> Result<Self, TrainError> {
        adamw.validate()?;
        schedule.validate()?;
        if !(max_grad_norm > 0.0) {
            return Err(TrainError::Config(format!("max_grad_norm must be positive, got {max_grad_norm}")));
        }
        if micro_batch_size == 0 {
            return Err(TrainError::Config("micro_batch_size must be positive".into()));
        }
        Ok(Self { model, adamw, schedule, max_grad_norm, micro_batch_size })
    }

    pub fn fresh_optimizer(&self) -> AdamWState {
        AdamWState::new(self.adamw.clone(), self.model.num_params())
    }

    /// Mean loss and gradient of one batch, accumulated over micro-batches.
    pub fn batch_gradient(&self, params: &ParamVector, batch: &TokenBatch) -> Result<(f64, ParamVector), TrainError> {
        if batch.batch_size() % self.micro_batch_size != 0 {
            return Err(TrainError::Config(format!(
                "batch of {} rows does not split into micro-batches of {}",
                batch.batch_size(),
                self.micro_batch_size
            )));
        }
        let mut acc = GradAccumulator::new(params.len());
        let mut loss = 0f64;
        let parts = batch.micro_batches(self.micro_batch_size);
        for part in &parts {
            let (l, g) = self.model.forward_backward(params.as_slice(), part)?;
            loss += l;
            acc.accumulate(&g)?;
        }
        Ok((loss / parts.len() as f64, acc.finalize()?))
    }

    /// Runs `steps` optimizer steps starting at global step `first_step`.
    /// The optimizer state carries over between calls; callers decide when
    /// to reset it.
    pub fn train_steps(
        &self,
        params: ParamVector,
        opt: &mut AdamWState,
        iter: &mut BatchIterator,
        first_step: u64,
        steps: u64,
        client_id: Option<u32>,
    ) -> Result<(ParamVector, Vec<StepTelemetry>), TrainError> {
        let mut params = params;
        let mut telemetry = Vec::with_capacity(steps as usize);
        iter.seek_to_step(first_step);
        for s in 0..steps {
            let step = first_step + s;
            let batch = iter.next_batch();
            let (loss, grad) = self.batch_gradient(&params, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { client: client_id, step });
            }
            let (clipped, grad_norm_raw) = clip_grad(&grad, self.max_grad_norm)?;
            let lr = self.schedule.lr_at(step);
            let (next, grad_norm_applied) = opt.step(&params, &clipped, lr)?;
            params = next;
            telemetry.push(StepTelemetry {
                step,
                loss,
                grad_norm_raw,
                grad_norm_applied,
                lr,
                param_norm: params.l2_norm(),
            });
        }
        Ok((params, telemetry))
    }

    /// One client round: fresh optimizer, `task.local_steps` steps from the
    /// received global model, and the resulting delta.
    pub fn train_round(
        &self,
        w_received: &ParamVector,
        iter: &mut BatchIterator,
        task: &TrainTask,
    ) -> Result<RoundOutput, TrainError> {
        if task.local_steps == 0 {
            return Err(TrainError::ZeroSteps);
        }
        if w_received.len() != self.model.num_params() {
            return Err(TrainError::LengthMismatch { expected: self.model.num_params(), got: w_received.len() });
        }
        let mut opt = self.fresh_optimizer();
        let (w_local, telemetry) = self.train_steps(
            w_received.clone(),
            &mut opt,
            iter,
            task.schedule_offset,
            task.local_steps,
            Some(task.client_id),
        )?;
        let delta = w_received.sub(&w_local)?;
        let final_params = w_received.sub(&delta)?;

        let mean_loss = telemetry.iter().map(|t| t.loss).sum::<f64>() / telemetry.len() as f64;
        let mut local_metrics = BTreeMap::new();
        local_metrics.insert("loss".to_string(), mean_loss);
        local_metrics.insert("perplexity".to_string(), super::perplexity(mean_loss));
        local_metrics.insert("param_norm".to_string(), final_params.l2_norm());
        local_metrics.insert("delta_norm".to_string(), delta.l2_norm());
        let update = ClientUpdate {
            client_id: task.client_id,
            round: task.round,
            n_k: iter.shard_len() as u64,
            delta,
            local_metrics,
        };
        Ok(RoundOutput { update, telemetry, final_params })
    }
}

/// Mean next-token cross-entropy of `params` over the listed samples.
pub fn evaluate(
    model: &TinyLM,
    params: &ParamVector,
    corpus: &TokenizedCorpus,
    samples: &[usize],
    batch_size: usize,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("evaluation set is empty".into()));
    }
    let mut weighted = 0f64;
    for chunk in samples.chunks(batch_size.max(1)) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|&i| corpus.sample(i).to_vec()).collect();
        let loss = model.loss(params.as_slice(), &TokenBatch::from_rows(&rows))?;
        weighted += loss * chunk.len() as f64;
    }
    Ok(weighted / samples.len() as f64)
}
