//! Closed-form parameter and FLOP counts.
//!
//! FLOPs use 2 per multiply-accumulate and cover every matrix product of a
//! forward pass: attention projections, FFN or expert matrices, router
//! columns, the output head, and the two `t x t` attention products per
//! layer. Embedding lookups, norms and nonlinearities are not counted.

use crate::error::Result;
use crate::model::{Arch, ModelConfig};

pub fn count_params(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    let d = config.hidden_size as u64;
    let v = config.vocab_size as u64;
    let ff = config.intermediate_size as u64;
    let l = config.n_layers as u64;
    let embeddings = if config.tie_embeddings { v * d } else { 2 * v * d };
    let per_layer = 4 * d * d + 3 * d * ff + 2 * d;
    Ok(embeddings + l * (per_layer + finedeep_extra_per_layer(config)) + d)
}

/// Routers plus the norms of sub-layers after the first.
fn finedeep_extra_per_layer(config: &ModelConfig) -> u64 {
    if config.arch != Arch::Finedeep {
        return 0;
    }
    let d = config.hidden_size as u64;
    let (m, k) = (config.sublayers as u64, config.experts_per_sublayer as u64);
    let routers = if config.router_enabled { m * k * d } else { 0 };
    routers + (m - 1) * d
}

/// Multiply-accumulates of one forward pass over `seq` tokens.
pub fn count_macs(config: &ModelConfig, seq: usize) -> Result<u64> {
    config.validate()?;
    let d = config.hidden_size as u64;
    let ff = config.intermediate_size as u64;
    let t = seq as u64;
    let routers = match config.arch {
        Arch::Finedeep if config.router_enabled => (config.sublayers * config.experts_per_sublayer) as u64 * d,
        _ => 0,
    };
    let linear_per_token = config.n_layers as u64 * (4 * d * d + 3 * d * ff + routers) + d * config.vocab_size as u64;
    let attention = config.n_layers as u64 * 2 * t * t * d;
    Ok(t * linear_per_token + attention)
}

pub fn count_flops(config: &ModelConfig, batch: usize, seq: usize) -> Result<u64> {
    Ok(2 * batch as u64 * count_macs(config, seq)?)
}
