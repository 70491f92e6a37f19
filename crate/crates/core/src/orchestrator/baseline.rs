use crate::config::ExperimentConfig;
use crate::data::BatchIterator;
use crate::params::ParamVector;
use crate::seed::mix;
use crate::telemetry::{Archive, MetricsRecord, Scope};
use crate::train::{evaluate, perplexity};

use super::runtime::prepare;
use super::OrchestratorError;

pub struct BaselineOutcome {
    pub params: ParamVector,
    pub archive: Archive,
    /// Validation cross-entropy of the final model.
    pub final_loss: f64,
}

/// Centralized counterpart of a federated run: one AdamW state that is never
/// reset, batches drawn from the union of all client shards, and
/// `rounds * local_steps` sequential steps on the same schedule.
///
/// Evaluations are recorded every `local_steps` steps under the round they
/// would close in the federated run.
pub fn run_centralized(config: &ExperimentConfig) -> Result<BaselineOutcome, OrchestratorError> {
    let p = prepare(config)?;
    let trainer = &p.trainer;
    let s = config.federation.local_steps;
    let mut iter = BatchIterator::new(
        p.corpus.clone(),
        p.split.training_indices(),
        config.local.batch_size,
        mix(config.data.seed, 0xCE27),
    )?;
    let mut archive = Archive::new();
    let eval = |params: &ParamVector| {
        evaluate(&trainer.model, params, &p.corpus, &p.eval_indices, config.data.eval_batch_size)
    };
    let mut params = trainer.model.init_params();
    let mut opt = trainer.fresh_optimizer();
    let mut loss = eval(&params)?;
    archive.record(MetricsRecord::new(Scope::Eval, 0).with("loss", loss).with("perplexity", perplexity(loss)))?;
    for round in 0..config.federation.rounds {
        let (next, telemetry) = trainer.train_steps(params, &mut opt, &mut iter, round * s, s, None)?;
        params = next;
        for st in telemetry {
            archive.record(
                MetricsRecord::new(Scope::ClientStep, round)
                    .at_step(st.step)
                    .with("loss", st.loss)
                    .with("perplexity", perplexity(st.loss))
                    .with("lr", st.lr)
                    .with("grad_norm_raw", st.grad_norm_raw)
                    .with("grad_norm_applied", st.grad_norm_applied)
                    .with("param_norm", st.param_norm),
            )?;
        }
        loss = eval(&params)?;
        archive.record(
            MetricsRecord::new(Scope::Eval, round + 1).with("loss", loss).with("perplexity", perplexity(loss)),
        )?;
    }
    Ok(BaselineOutcome { params, archive, final_loss: loss })
}
