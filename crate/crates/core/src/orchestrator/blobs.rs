//! Byte formats of the global-model and client-update blobs. Both use the
//! sectioned checkpoint container.

use std::collections::BTreeMap;

use crate::fedopt::ClientUpdate;
use crate::params::{Checkpoint, CheckpointError, LayoutManifest, ParamVector};
use crate::train::StepTelemetry;

pub fn encode_global_blob(round: u64, params: &ParamVector, manifest: &LayoutManifest) -> Result<Vec<u8>, CheckpointError> {
    Checkpoint::new().with_u64("round", round).with_vector("params", params).with_manifest(manifest).to_bytes()
}

/// Returns `(round, params)` after checking the payload against `manifest`.
pub fn decode_global_blob(bytes: &[u8], manifest: &LayoutManifest) -> Result<(u64, ParamVector), CheckpointError> {
    let ckpt = Checkpoint::from_bytes(bytes)?;
    let params = ckpt.vector("params")?;
    if ckpt.manifest()? != *manifest || params.len() != manifest.total_len() {
        return Err(CheckpointError::Malformed("global model layout differs from the configured model".into()));
    }
    Ok((ckpt.u64("round")?, params))
}

/// Everything a client uploads after a round.
#[derive(Clone, Debug)]
pub struct ClientBlob {
    pub update: ClientUpdate,
    pub local_steps: u64,
    pub telemetry: Vec<StepTelemetry>,
}

pub fn encode_client_blob(blob: &ClientBlob) -> Result<Vec<u8>, CheckpointError> {
    let u = &blob.update;
    Checkpoint::new()
        .with_u64("round", u.round)
        .with_u64("client_id", u.client_id as u64)
        .with_u64("n_k", u.n_k)
        .with_u64("local_steps", blob.local_steps)
        .with_vector("delta", &u.delta)
        .with_json("metrics", &u.local_metrics)
        .with_json("telemetry", &blob.telemetry)
        .to_bytes()
}

pub fn decode_client_blob(bytes: &[u8]) -> Result<ClientBlob, CheckpointError> {
    let ckpt = Checkpoint::from_bytes(bytes)?;
    let client_id = u32::try_from(ckpt.u64("client_id")?)
        .map_err(|_| CheckpointError::Malformed("client_id out of range".into()))?;
    let update = ClientUpdate {
        client_id,
        round: ckpt.u64("round")?,
        n_k: ckpt.u64("n_k")?,
        delta: ckpt.vector("delta")?,
        local_metrics: ckpt.json::<BTreeMap<String, f64>>("metrics")?,
    };
    Ok(ClientBlob { update, local_steps: ckpt.u64("local_steps")?, telemetry: ckpt.json("telemetry")? })
}
