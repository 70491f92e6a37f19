//! Parameter vectors, tensor layouts and the checkpoint container.

mod checkpoint;
mod vector;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, Section, FORMAT_VERSION, MAGIC,
    MANIFEST_SECTION,
};
pub use vector::{checked_l2_norm, l2_norm_slice, LayoutManifest, ParamVector, TensorEntry};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("parameter vector is empty")]
    Empty,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("layout: {0}")]
    Layout(String),
}
