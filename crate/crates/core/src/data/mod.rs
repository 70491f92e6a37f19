//! Byte-level corpora, IID client shards and deterministic batch streams.

mod corpus;
mod iter;
mod synth;

pub use corpus::{
    detokenize, partition_indices, partition_iid, shard_assignment_json, split_corpus, tokenize_bytes,
    DataSplit, ShardSpec, TokenizedCorpus, BYTE_VOCAB,
};
pub use iter::{BatchIterator, TokenBatch};
pub use synth::{synth_corpus, Structure};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("text is empty")]
    EmptyText,
    #[error("text has {len} bytes, shorter than one sample of {seq_len}")]
    TooShort { len: usize, seq_len: usize },
    #[error("sequence length must be at least 2, got {0}")]
    SeqLen(usize),
    #[error("number of shards must be positive")]
    ZeroShards,
    #[error("{samples} samples cannot fill {shards} shards")]
    NotEnoughSamples { samples: usize, shards: usize },
    #[error("validation fraction {0} outside [0, 1)")]
    ValidationFraction(f64),
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("shard is empty")]
    EmptyShard,
}
