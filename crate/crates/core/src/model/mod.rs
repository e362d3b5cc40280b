//! Language model assembly, training and evaluation.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod lm;
pub mod train;

pub use config::{Arch, ModelConfig, REFERENCE_VOCAB};
pub use eval::eval_ppl;
pub use lm::{causal_mha, cross_entropy_loss, AttentionParams, FfnBlock, ForwardOptions, Layer, LmModel};
pub use train::{train, MetricRecord, TrainOptions, Trainer};
