//! Synthetic byte corpora and the statistics used to judge models on them.
//!
//! The generator emits English-looking prose from a seeded word-level
//! Markov chain over an invented lexicon. Byte-level structure (spelling,
//! word transitions, punctuation) is learnable well below the unigram
//! entropy, which makes it a useful yardstick for tiny models.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const ONSETS: &[&str] = &["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "pl", "sh", "ch", "th"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "y"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "m"];

/// Words in the invented lexicon.
const LEXICON: usize = 600;
/// Preferred successors per word.
const FANOUT: usize = 6;

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / (r as f64).powf(exponent)).collect()
}

/// Deterministic pseudo-English text of exactly `n_bytes` bytes.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words: Vec<String> = Vec::with_capacity(LEXICON);
    while words.len() < LEXICON {
        let syllables = 1 + rng.random_range(0..3) + usize::from(rng.random_bool(0.2));
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    let global = WeightedIndex::new(zipf_weights(LEXICON, 1.1)).expect("positive weights");
    let local = WeightedIndex::new(zipf_weights(FANOUT, 1.5)).expect("positive weights");
    let successors: Vec<Vec<usize>> = (0..LEXICON)
        .map(|_| (0..FANOUT).map(|_| global.sample(&mut rng)).collect())
        .collect();

    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut prev = global.sample(&mut rng);
    while out.len() < n_bytes {
        let sentences = rng.random_range(2..6);
        for _ in 0..sentences {
            let len = rng.random_range(4..14);
            for i in 0..len {
                let w = if rng.random_bool(0.8) { successors[prev][local.sample(&mut rng)] } else { global.sample(&mut rng) };
                let word = &words[w];
                if i == 0 {
                    let mut chars = word.chars();
                    if let Some(c) = chars.next() {
                        out.extend(c.to_uppercase().to_string().bytes());
                        out.extend(chars.as_str().bytes());
                    }
                } else {
                    out.push(b' ');
                    out.extend(word.bytes());
                }
                if i + 1 < len && i > 1 && rng.random_bool(0.08) {
                    out.push(b',');
                }
                prev = w;
            }
            out.push(if rng.random_bool(0.1) { b'?' } else { b'.' });
            out.push(b' ');
        }
        out.push(b'\n');
    }
    out.truncate(n_bytes);
    out
}

/// Entropy, in nats, of the empirical byte distribution.
pub fn unigram_entropy(bytes: &[u8]) -> Result<f64> {
    if bytes.is_empty() {
        return Err(Error::Input("entropy of an empty corpus".into()));
    }
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Splits off the final `heldout_fraction` of the corpus.
pub fn split_heldout(bytes: &[u8], heldout_fraction: f64) -> Result<(&[u8], &[u8])> {
    if !(0.0..1.0).contains(&heldout_fraction) {
        return Err(Error::Config(format!("held-out fraction {heldout_fraction} not in [0, 1)")));
    }
    let cut = bytes.len() - (bytes.len() as f64 * heldout_fraction).round() as usize;
    Ok(bytes.split_at(cut))
}

/// Byte values as token ids, rejecting bytes outside a smaller vocabulary.
pub fn byte_tokens(bytes: &[u8], vocab_size: usize) -> Result<Vec<usize>> {
    bytes
        .iter()
        .map(|&b| {
            let t = b as usize;
            if t < vocab_size {
                Ok(t)
            } else {
                Err(Error::Input(format!("byte {t} is outside the vocabulary of {vocab_size}")))
            }
        })
        .collect()
}
