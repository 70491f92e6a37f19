//! Run metrics: the record archive, CSV export and the per-round norm
//! quantities.

mod archive;
mod norms;

pub use archive::{Archive, ArchiveError, MetricsRecord, Scope, COLUMNS};
pub use norms::{compute_round_norms, RoundNorms};
