//! Shared fixtures for the criterion benches.

use finedeep::model::corpus::{byte_tokens, synthetic_corpus};
use finedeep::{ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Toy byte-level config, dense when `m == 0`.
pub fn toy(m: usize, k: usize) -> ModelConfig {
    let c = ModelConfig::toy();
    if m == 0 {
        c
    } else {
        c.with_finedeep(m, k)
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Token ids of a synthetic text, long enough for `n` tokens.
pub fn tokens(n: usize, vocab: usize) -> Vec<usize> {
    byte_tokens(&synthetic_corpus(n, 7), vocab).expect("byte vocab")
}
