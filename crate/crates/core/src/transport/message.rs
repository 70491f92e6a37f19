//! Control-plane frames.
//!
//! ```text
//! tag u8 | version u8 | payload_len u32 | JSON payload | crc32(payload) u32
//! ```
//!
//! Integers are little-endian. The payload is the variant's fields as a JSON
//! object; the tag selects the variant.

use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const FRAME_VERSION: u8 = 1;
const HEADER_LEN: usize = 6;
const TRAILER_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMessage {
    TrainTask {
        round: u64,
        client_id: u32,
        local_steps: u64,
        schedule_offset: u64,
        data_seed: u64,
        blob_key: String,
    },
    UpdateReady {
        round: u64,
        client_id: u32,
        n_k: u64,
        blob_key: String,
    },
    Join {
        node_manager_id: u32,
        worker_slots: u32,
    },
    Leave {
        node_manager_id: u32,
    },
    Heartbeat {
        id: u32,
        round: u64,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame of {got} bytes, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("unknown message tag {0}")]
    BadTag(u8),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("frame checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("frame payload: {0}")]
    Payload(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainTaskFields {
    round: u64,
    client_id: u32,
    local_steps: u64,
    schedule_offset: u64,
    data_seed: u64,
    blob_key: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateReadyFields {
    round: u64,
    client_id: u32,
    n_k: u64,
    blob_key: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JoinFields {
    node_manager_id: u32,
    worker_slots: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeaveFields {
    node_manager_id: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeartbeatFields {
    id: u32,
    round: u64,
}

impl ControlMessage {
    pub fn tag(&self) -> u8 {
        match self {
            ControlMessage::TrainTask { .. } => 0,
            ControlMessage::UpdateReady { .. } => 1,
            ControlMessage::Join { .. } => 2,
            ControlMessage::Leave { .. } => 3,
            ControlMessage::Heartbeat { .. } => 4,
        }
    }
}

pub fn encode_message(m: &ControlMessage) -> Vec<u8> {
    let payload = match m.clone() {
        ControlMessage::TrainTask { round, client_id, local_steps, schedule_offset, data_seed, blob_key } => {
            serde_json::to_vec(&TrainTaskFields { round, client_id, local_steps, schedule_offset, data_seed, blob_key })
        }
        ControlMessage::UpdateReady { round, client_id, n_k, blob_key } => {
            serde_json::to_vec(&UpdateReadyFields { round, client_id, n_k, blob_key })
        }
        ControlMessage::Join { node_manager_id, worker_slots } => {
            serde_json::to_vec(&JoinFields { node_manager_id, worker_slots })
        }
        ControlMessage::Leave { node_manager_id } => serde_json::to_vec(&LeaveFields { node_manager_id }),
        ControlMessage::Heartbeat { id, round } => serde_json::to_vec(&HeartbeatFields { id, round }),
    }
    .expect("plain structs serialize");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.push(m.tag());
    out.push(FRAME_VERSION);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn decode_message(bytes: &[u8]) -> Result<ControlMessage, FrameError> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(FrameError::Length { expected: HEADER_LEN + TRAILER_LEN, got: bytes.len() });
    }
    let tag = bytes[0];
    if tag > 4 {
        return Err(FrameError::BadTag(tag));
    }
    if bytes[1] != FRAME_VERSION {
        return Err(FrameError::BadVersion(bytes[1]));
    }
    let len = u32::from_le_bytes(bytes[2..6].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + len + TRAILER_LEN;
    if bytes.len() != expected {
        return Err(FrameError::Length { expected, got: bytes.len() });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
    let stored = u32::from_le_bytes(bytes[HEADER_LEN + len..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FrameError::Crc { stored, computed });
    }
    fn parse<T: DeserializeOwned>(p: &[u8]) -> Result<T, FrameError> {
        Ok(serde_json::from_slice(p)?)
    }
    Ok(match tag {
        0 => {
            let f: TrainTaskFields = parse(payload)?;
            ControlMessage::TrainTask {
                round: f.round,
                client_id: f.client_id,
                local_steps: f.local_steps,
                schedule_offset: f.schedule_offset,
                data_seed: f.data_seed,
                blob_key: f.blob_key,
            }
        }
        1 => {
            let f: UpdateReadyFields = parse(payload)?;
            ControlMessage::UpdateReady { round: f.round, client_id: f.client_id, n_k: f.n_k, blob_key: f.blob_key }
        }
        2 => {
            let f: JoinFields = parse(payload)?;
            ControlMessage::Join { node_manager_id: f.node_manager_id, worker_slots: f.worker_slots }
        }
        3 => ControlMessage::Leave { node_manager_id: parse::<LeaveFields>(payload)?.node_manager_id },
        _ => {
            let f: HeartbeatFields = parse(payload)?;
            ControlMessage::Heartbeat { id: f.id, round: f.round }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_variants() -> Vec<ControlMessage> {
        vec![
            ControlMessage::TrainTask {
                round: 3,
                client_id: 7,
                local_steps: 500,
                schedule_offset: 1500,
                data_seed: u64::MAX,
                blob_key: "round-3/global".into(),
            },
            ControlMessage::UpdateReady { round: 3, client_id: 7, n_k: 1000, blob_key: "round-3/client-7".into() },
            ControlMessage::Join { node_manager_id: 2, worker_slots: 4 },
            ControlMessage::Leave { node_manager_id: 2 },
            ControlMessage::Heartbeat { id: 9, round: 11 },
        ]
    }

    #[test]
    fn every_variant_round_trips() {
        for m in all_variants() {
            let frame = encode_message(&m);
            assert_eq!(frame[0], m.tag());
            assert_eq!(frame[1], FRAME_VERSION);
            assert_eq!(decode_message(&frame).unwrap(), m);
        }
    }

    #[test]
    fn truncated_frame_is_a_length_error() {
        let frame = encode_message(&all_variants()[1]);
        assert!(matches!(decode_message(&frame[..frame.len() - 1]), Err(FrameError::Length { .. })));
        assert!(matches!(decode_message(&frame[..3]), Err(FrameError::Length { .. })));
    }

    #[test]
    fn flipped_payload_bit_is_a_crc_error() {
        let mut frame = encode_message(&all_variants()[0]);
        frame[10] ^= 0x04;
        assert!(matches!(decode_message(&frame), Err(FrameError::Crc { .. })));
    }

    #[test]
    fn bad_tag_and_version() {
        let mut frame = encode_message(&all_variants()[4]);
        frame[0] = 17;
        assert!(matches!(decode_message(&frame), Err(FrameError::BadTag(17))));
        let mut frame = encode_message(&all_variants()[4]);
        frame[1] = 2;
        assert!(matches!(decode_message(&frame), Err(FrameError::BadVersion(2))));
    }

    #[test]
    fn tag_payload_mismatch_is_rejected() {
        // A Leave payload framed under the Join tag.
        let mut frame = encode_message(&ControlMessage::Leave { node_manager_id: 1 });
        frame[0] = 2;
        assert!(matches!(decode_message(&frame), Err(FrameError::Payload(_))));
    }
}
