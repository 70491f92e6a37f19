use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

pub const BYTE_VOCAB: usize = 256;

/// Token stream cut into fixed-length samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedCorpus {
    tokens: Vec<u32>,
    vocab_size: usize,
    seq_len: usize,
}

impl TokenizedCorpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_samples(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn sample(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// Byte-level tokenization: each byte is one token id, samples are `seq_len`
/// bytes long, and the tail that does not fill a sample is dropped.
pub fn tokenize_bytes(text: &[u8], seq_len: usize) -> Result<TokenizedCorpus, DataError> {
    if seq_len < 2 {
        return Err(DataError::SeqLen(seq_len));
    }
    if text.is_empty() {
        return Err(DataError::EmptyText);
    }
    if text.len() < seq_len {
        return Err(DataError::TooShort { len: text.len(), seq_len });
    }
    let kept = text.len() / seq_len * seq_len;
    Ok(TokenizedCorpus {
        tokens: text[..kept].iter().map(|&b| b as u32).collect(),
        vocab_size: BYTE_VOCAB,
        seq_len,
    })
}

pub fn detokenize(corpus: &TokenizedCorpus) -> Vec<u8> {
    corpus.tokens.iter().map(|&t| t as u8).collect()
}

/// One client's slice of the training samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardSpec {
    pub shard_id: u32,
    pub indices: Vec<usize>,
}

impl ShardSpec {
    pub fn n_k(&self) -> u64 {
        self.indices.len() as u64
    }
}

/// Splits `indices` into `n` equal blocks of a seeded permutation. Leftover
/// samples that would make shards unequal are dropped.
pub fn partition_indices(indices: &[usize], n: usize, seed: u64) -> Result<Vec<ShardSpec>, DataError> {
    if n == 0 {
        return Err(DataError::ZeroShards);
    }
    if indices.len() < n {
        return Err(DataError::NotEnoughSamples { samples: indices.len(), shards: n });
    }
    let mut perm = indices.to_vec();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = perm.len() / n;
    Ok(perm
        .chunks_exact(size)
        .take(n)
        .enumerate()
        .map(|(k, block)| ShardSpec { shard_id: k as u32, indices: block.to_vec() })
        .collect())
}

/// IID partition of every sample of `corpus` into `n` equal shards.
pub fn partition_iid(corpus: &TokenizedCorpus, n: usize, seed: u64) -> Result<Vec<ShardSpec>, DataError> {
    let all: Vec<usize> = (0..corpus.num_samples()).collect();
    partition_indices(&all, n, seed)
}

/// Held-out validation samples plus the client shards built from the rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    pub validation: Vec<usize>,
    pub shards: Vec<ShardSpec>,
}

impl DataSplit {
    /// Every sample owned by some shard, in shard order.
    pub fn training_indices(&self) -> Vec<usize> {
        self.shards.iter().flat_map(|s| s.indices.iter().copied()).collect()
    }
}

/// Carves the validation set first, then partitions the remainder.
pub fn split_corpus(
    corpus: &TokenizedCorpus,
    n_shards: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<DataSplit, DataError> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(DataError::ValidationFraction(validation_fraction));
    }
    let count = corpus.num_samples();
    let mut perm: Vec<usize> = (0..count).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_7A11));
    let n_val = ((count as f64 * validation_fraction).ceil() as usize).min(count);
    let (val, rest) = perm.split_at(n_val);
    let mut validation = val.to_vec();
    validation.sort_unstable();
    let shards = partition_indices(rest, n_shards, seed)?;
    Ok(DataSplit { validation, shards })
}

/// `{"<shard_id>": [indices...]}` for auditing which samples each client owns.
pub fn shard_assignment_json(shards: &[ShardSpec]) -> String {
    let map: BTreeMap<String, &Vec<usize>> =
        shards.iter().map(|s| (s.shard_id.to_string(), &s.indices)).collect();
    serde_json::to_string_pretty(&map).expect("plain map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn floor_division_of_samples() {
        let text: Vec<u8> = (0..130u32).map(|i| i as u8).collect();
        let c = tokenize_bytes(&text, 64).unwrap();
        assert_eq!(c.num_samples(), 2);
        assert_eq!(c.tokens().len(), 128);
        assert_eq!(detokenize(&c), &text[..128]);
    }

    #[test]
    fn periodic_text_keeps_its_period() {
        let text = b"ab".repeat(100);
        let c = tokenize_bytes(&text, 64).unwrap();
        for i in 0..c.num_samples() {
            let s = c.sample(i);
            assert!(s.chunks(2).all(|p| p == [b'a' as u32, b'b' as u32]));
        }
    }

    #[test]
    fn tokenize_errors() {
        assert_eq!(tokenize_bytes(b"", 4), Err(DataError::EmptyText));
        assert_eq!(tokenize_bytes(b"abc", 4), Err(DataError::TooShort { len: 3, seq_len: 4 }));
        assert_eq!(tokenize_bytes(b"abc", 1), Err(DataError::SeqLen(1)));
    }

    fn corpus_with(samples: usize) -> TokenizedCorpus {
        tokenize_bytes(&vec![b'x'; samples * 4], 4).unwrap()
    }

    #[test]
    fn equal_split() {
        let shards = partition_iid(&corpus_with(8000), 8, 1).unwrap();
        assert_eq!(shards.len(), 8);
        assert!(shards.iter().all(|s| s.n_k() == 1000));
        let one = partition_iid(&corpus_with(10), 1, 1).unwrap();
        assert_eq!(one[0].n_k(), 10);
    }

    #[test]
    fn remainder_dropped_and_disjoint() {
        let shards = partition_iid(&corpus_with(83), 8, 5).unwrap();
        let mut seen = HashSet::new();
        for s in &shards {
            assert_eq!(s.n_k(), 10);
            for &i in &s.indices {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(seen.len(), 80);
    }

    #[test]
    fn seeded_permutation() {
        let c = corpus_with(100);
        assert_eq!(partition_iid(&c, 4, 7).unwrap(), partition_iid(&c, 4, 7).unwrap());
        assert_ne!(partition_iid(&c, 4, 7).unwrap(), partition_iid(&c, 4, 8).unwrap());
    }

    #[test]
    fn partition_errors() {
        assert_eq!(partition_iid(&corpus_with(4), 0, 1), Err(DataError::ZeroShards));
        assert_eq!(
            partition_iid(&corpus_with(3), 4, 1),
            Err(DataError::NotEnoughSamples { samples: 3, shards: 4 })
        );
    }

    #[test]
    fn validation_never_reaches_a_shard() {
        let c = corpus_with(1003);
        let split = split_corpus(&c, 8, 0.1, 3).unwrap();
        assert_eq!(split.validation.len(), 101);
        let val: HashSet<_> = split.validation.iter().collect();
        assert!(split.training_indices().iter().all(|i| !val.contains(i)));
        assert!(split.shards.iter().all(|s| s.n_k() == 902 / 8));
        assert!(split_corpus(&c, 8, 1.0, 3).is_err());
    }

    #[test]
    fn assignment_json_shape() {
        let shards = vec![
            ShardSpec { shard_id: 0, indices: vec![3, 1] },
            ShardSpec { shard_id: 1, indices: vec![0, 2] },
        ];
        let v: serde_json::Value = serde_json::from_str(&shard_assignment_json(&shards)).unwrap();
        assert_eq!(v["0"], serde_json::json!([3, 1]));
        assert_eq!(v["1"], serde_json::json!([0, 2]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shards_partition_a_permuted_prefix(count in 1usize..400, n in 1usize..12, seed in any::<u64>()) {
                prop_assume!(count >= n);
                let shards = partition_iid(&corpus_with(count), n, seed).unwrap();
                let size = count / n;
                let mut union: Vec<usize> = Vec::new();
                for s in &shards {
                    prop_assert_eq!(s.indices.len(), size);
                    union.extend(&s.indices);
                }
                let distinct: HashSet<_> = union.iter().collect();
                prop_assert_eq!(distinct.len(), n * size);
                prop_assert!(union.iter().all(|&i| i < count));
            }
        }
    }
}
