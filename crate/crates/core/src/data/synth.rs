use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// 64 printable symbols used by the synthetic generators.
pub const ALPHABET: &[u8; 64] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Order-1 Markov chain; each symbol has between 2 and 6 successors.
    Markov,
    /// Space-separated draws from a small bank of fixed phrases.
    RepeatedPhrases,
}

/// Deterministic low-entropy pseudo-text of exactly `n_bytes` bytes.
pub fn synth_corpus(seed: u64, n_bytes: usize, structure: Structure) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match structure {
        Structure::Markov => markov(&mut rng, n_bytes),
        Structure::RepeatedPhrases => phrases(&mut rng, n_bytes),
    }
}

fn markov(rng: &mut ChaCha8Rng, n_bytes: usize) -> Vec<u8> {
    let table: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..ALPHABET.len())
        .map(|_| {
            let fanout = rng.gen_range(2..=6);
            let mut succ: Vec<usize> = (0..ALPHABET.len()).collect();
            succ.shuffle(rng);
            succ.truncate(fanout);
            // Geometric-ish weights keep one successor dominant.
            let weights: Vec<f64> = (0..fanout).map(|i| rng.gen_range(0.5..1.0) * 0.5f64.powi(i as i32)).collect();
            (succ, WeightedIndex::new(weights).expect("positive weights"))
        })
        .collect();
    let mut state = rng.gen_range(0..ALPHABET.len());
    let mut out = Vec::with_capacity(n_bytes);
    for _ in 0..n_bytes {
        out.push(ALPHABET[state]);
        let (succ, dist) = &table[state];
        state = succ[dist.sample(rng)];
    }
    out
}

fn phrases(rng: &mut ChaCha8Rng, n_bytes: usize) -> Vec<u8> {
    let letters = &ALPHABET[..52];
    let bank: Vec<Vec<u8>> = (0..16)
        .map(|_| {
            let words = rng.gen_range(2..=5);
            let mut phrase = Vec::new();
            for w in 0..words {
                if w > 0 {
                    phrase.push(b' ');
                }
                let len = rng.gen_range(2..=7);
                phrase.extend((0..len).map(|_| letters[rng.gen_range(0..letters.len())]));
            }
            phrase.push(b'.');
            phrase
        })
        .collect();
    let mut out = Vec::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        out.extend_from_slice(&bank[rng.gen_range(0..bank.len())]);
        out.push(b' ');
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Empirical conditional entropy H(next | current) in nats.
    fn bigram_entropy(text: &[u8]) -> f64 {
        let mut pair: HashMap<(u8, u8), f64> = HashMap::new();
        let mut first: HashMap<u8, f64> = HashMap::new();
        for w in text.windows(2) {
            *pair.entry((w[0], w[1])).or_default() += 1.0;
            *first.entry(w[0]).or_default() += 1.0;
        }
        let total = (text.len() - 1) as f64;
        pair.iter()
            .map(|(&(a, _), &c)| -(c / total) * (c / first[&a]).ln())
            .sum()
    }

    #[test]
    fn deterministic_per_seed() {
        for s in [Structure::Markov, Structure::RepeatedPhrases] {
            assert_eq!(synth_corpus(4, 5000, s), synth_corpus(4, 5000, s));
            assert_ne!(synth_corpus(4, 5000, s), synth_corpus(5, 5000, s));
        }
    }

    #[test]
    fn markov_is_strongly_structured() {
        let text = synth_corpus(1, 200_000, Structure::Markov);
        assert!(text.iter().all(|b| ALPHABET.contains(b)));
        let h = bigram_entropy(&text);
        assert!(h < (64f64).ln(), "entropy {h}");
        // Fan-out of at most six successors bounds the rate well below uniform.
        assert!(h < (6f64).ln(), "entropy {h}");
    }

    #[test]
    fn phrases_are_printable_and_sized() {
        let text = synth_corpus(2, 1234, Structure::RepeatedPhrases);
        assert_eq!(text.len(), 1234);
        assert!(text.iter().all(|b| ALPHABET.contains(b)));
        assert!(bigram_entropy(&text) < (64f64).ln());
    }

    #[test]
    fn single_byte() {
        assert_eq!(synth_corpus(3, 1, Structure::Markov).len(), 1);
        assert_eq!(synth_corpus(3, 1, Structure::RepeatedPhrases).len(), 1);
    }
}
