//! AdamW training on random windows of a token stream.
//!
//! Each step samples `batch_size` windows, differentiates them on separate
//! graphs in parallel and sums the gradients in batch order, so a run is a
//! pure function of the config seed regardless of thread count.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::corpus::byte_tokens;
use crate::model::lm::LmModel;
use crate::tensor::{Scalar, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;
/// Cosine decay floor as a fraction of the peak learning rate.
const MIN_LR_RATIO: f64 = 0.1;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_ms: u64,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub steps: usize,
    /// When false every record reports `elapsed_ms = 0`, making the log a
    /// pure function of config and corpus.
    pub record_time: bool,
}

impl TrainOptions {
    pub fn new(steps: usize) -> Self {
        Self { steps, record_time: true }
    }
}

/// Learning rate for zero-based `step` of `total`: linear warmup to
/// `peak`, then cosine decay to `MIN_LR_RATIO * peak`.
pub fn lr_at(peak: f64, warmup: usize, step: usize, total: usize) -> f64 {
    let warmup = warmup.min(total);
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = MIN_LR_RATIO * peak;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Model, optimiser state and sampling stream.
pub struct Trainer<T: Scalar = f64> {
    model: LmModel<T>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decay: Vec<bool>,
    rng: ChaCha8Rng,
    step: usize,
    total: usize,
    clock: Option<Instant>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: LmModel<T>, opts: TrainOptions) -> Result<Self> {
        if opts.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        let named = model.named_tensors();
        let m = named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        // Matrices decay; norm gains do not.
        let decay = named.iter().map(|(_, t)| t.ndim() == 2).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(model.config().seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            m,
            v,
            decay,
            rng,
            step: 0,
            total: opts.steps,
            clock: opts.record_time.then(Instant::now),
        })
    }

    pub fn model(&self) -> &LmModel<T> {
        &self.model
    }

    pub fn into_model(self) -> LmModel<T> {
        self.model
    }

    /// One optimisation step on windows sampled from `tokens`.
    pub fn step(&mut self, tokens: &[usize]) -> Result<MetricRecord> {
        let cfg = self.model.config().clone();
        if tokens.len() < 2 {
            return Err(Error::Config("corpus needs at least 2 tokens".into()));
        }
        let win = (cfg.max_seq_len + 1).min(tokens.len());
        let windows: Vec<&[usize]> = (0..cfg.batch_size)
            .map(|_| {
                let start = self.rng.random_range(0..=tokens.len() - win);
                &tokens[start..start + win]
            })
            .collect();

        let model = &self.model;
        let results = windows
            .par_iter()
            .map(|w| model.loss_and_grads(w))
            .collect::<Result<Vec<_>>>()?;
        let batch = results.len() as f64;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() / batch;
        let mut iter = results.into_iter();
        let mut grads = iter.next().expect("batch_size >= 1").1;
        for (_, g) in iter {
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
        }

        let mut scale = 1.0 / batch;
        if cfg.grad_clip > 0.0 {
            let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|&x| x.as_f64().powi(2)).sum();
            let norm = sq.sqrt() * scale;
            if norm > cfg.grad_clip {
                scale *= cfg.grad_clip / norm;
            }
        }

        let lr = lr_at(cfg.lr, cfg.warmup_steps, self.step, self.total);
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let (b1, b2, sc) = (T::of(BETA1), T::of(BETA2), T::of(scale));
        let (one, lr_t, eps) = (T::one(), T::of(lr), T::of(ADAM_EPS));
        let (bc1, bc2, wd) = (T::of(bc1), T::of(bc2), T::of(cfg.weight_decay));
        for ((((p, g), m), v), &decay) in self
            .model
            .tensors_mut()
            .into_iter()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(&self.decay)
        {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi * sc;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                if decay {
                    *pi = *pi - lr_t * wd * *pi;
                }
                *pi = *pi - lr_t * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        let elapsed_ms = self.clock.map_or(0, |c| c.elapsed().as_millis() as u64);
        Ok(MetricRecord { step: self.step, loss, lr, elapsed_ms })
    }
}

/// Trains a freshly initialised model on a byte corpus.
///
/// `on_metric` sees every record as it is produced; all records are also
/// returned.
pub fn train<T: Scalar>(
    config: &ModelConfig,
    corpus: &[u8],
    opts: TrainOptions,
    mut on_metric: impl FnMut(&MetricRecord),
) -> Result<(LmModel<T>, Vec<MetricRecord>)> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let tokens = byte_tokens(corpus, config.vocab_size)?;
    let mut trainer = Trainer::new(LmModel::init(config)?, opts)?;
    let mut log = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let rec = trainer.step(&tokens)?;
        on_metric(&rec);
        log.push(rec);
    }
    Ok((trainer.into_model(), log))
}
