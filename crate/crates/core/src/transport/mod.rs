//! Moving models around: the write-once blob store, control-message frames
//! and the analytical communication cost model.

mod cost;
mod message;
mod store;

pub use cost::{transfer_time, NetworkModel};
pub use message::{decode_message, encode_message, ControlMessage, FrameError, FRAME_VERSION};
pub use store::{BlobKey, BlobStore, FsStore, MemoryStore, Receipt, StoreError};
