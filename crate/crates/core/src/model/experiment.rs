//! Side-by-side toy runs: same corpus, same seeds, different architectures
//! or routing modes. Reports held-out loss, perplexity and mean NSAR.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::analysis::{capture_activations, nsar_report};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::corpus::byte_tokens;
use crate::model::eval::eval_loss;
use crate::model::train::{TrainOptions, Trainer};
use crate::model::LmModel;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Held-out tokens used for activation capture.
    pub capture_tokens: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    /// Mean training loss over the last tenth of the steps.
    pub final_train_loss: f64,
    pub heldout_loss: f64,
    pub heldout_ppl: f64,
    /// Mean NSAR over dense layers or expert sub-layers.
    pub mean_nsar: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub params: usize,
    pub mean_heldout_loss: f64,
    pub mean_ppl: f64,
    pub mean_nsar: f64,
    pub runs: Vec<RunResult>,
}

pub fn run_one<T: Scalar>(
    label: &str,
    config: &ModelConfig,
    train: &[usize],
    heldout: &[usize],
    spec: &ExperimentSpec,
    progress: &mut dyn FnMut(&str),
) -> Result<RunResult> {
    let start = Instant::now();
    let opts = TrainOptions { steps: spec.steps, record_time: false };
    let mut trainer = Trainer::<T>::new(LmModel::init(config)?, opts)?;
    let tail = (spec.steps / 10).max(1);
    let mut tail_sum = 0.0;
    for s in 0..spec.steps {
        let rec = trainer.step(train)?;
        if s + tail >= spec.steps {
            tail_sum += rec.loss;
        }
        if (s + 1) % 100 == 0 {
            progress(&format!("{label} seed {} step {} loss {:.4}", config.seed, s + 1, rec.loss));
        }
    }
    let model = trainer.into_model();
    let heldout_loss = eval_loss(&model, heldout)?;
    let captures = capture_activations(&model, heldout, spec.capture_tokens)?;
    let mean_nsar = nsar_report(&captures, spec.tau)?.mean_rate();
    Ok(RunResult {
        label: label.to_string(),
        seed: config.seed,
        final_train_loss: tail_sum / tail as f64,
        heldout_loss,
        heldout_ppl: heldout_loss.exp(),
        mean_nsar,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains every labelled config under every seed of `spec`.
pub fn compare<T: Scalar>(
    variants: &[(String, ModelConfig)],
    train: &[u8],
    heldout: &[u8],
    spec: &ExperimentSpec,
    mut progress: impl FnMut(&str),
) -> Result<Vec<ComparisonRow>> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (label, base) in variants {
        let train_tokens = byte_tokens(train, base.vocab_size)?;
        let heldout_tokens = byte_tokens(heldout, base.vocab_size)?;
        let mut runs = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            runs.push(run_one::<T>(label, &cfg, &train_tokens, &heldout_tokens, spec, &mut progress)?);
        }
        let n = runs.len() as f64;
        rows.push(ComparisonRow {
            label: label.clone(),
            params: crate::analysis::count_params(base)? as usize,
            mean_heldout_loss: runs.iter().map(|r| r.heldout_loss).sum::<f64>() / n,
            mean_ppl: runs.iter().map(|r| r.heldout_ppl).sum::<f64>() / n,
            mean_nsar: runs.iter().map(|r| r.mean_nsar).sum::<f64>() / n,
            runs,
        });
    }
    Ok(rows)
}

/// Plain-text table, one row per variant.
pub fn format_table(rows: &[ComparisonRow], tau: f64) -> String {
    let mut s = String::new();
    let nsar_col = format!("NSAR@{tau}");
    writeln!(s, "{:<24} {:>10} {:>12} {:>10} {:>10}", "variant", "params", "heldout_nll", "ppl", nsar_col).unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<24} {:>10} {:>12.4} {:>10.3} {:>10.4}",
            r.label, r.params, r.mean_heldout_loss, r.mean_ppl, r.mean_nsar
        )
        .unwrap();
    }
    s
}
