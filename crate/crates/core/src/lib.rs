//! Dense transformers whose feed-forward layers are split into fine-grained
//! experts stacked across several routed sub-layers.
//!
//! The crate covers the full loop at desk scale: a small reverse-mode
//! autodiff engine, the expert partition of a gated FFN, the routed
//! multi-sub-layer block, a decoder-only language model with training and
//! perplexity evaluation, activation-sparsity metrics, parameter and FLOP
//! accounting, and a checkpoint format with a dense-to-expert converter.

// `!(x >= 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod block;
pub mod error;
pub mod ffn;
pub mod gradcheck;
pub mod model;
pub mod storage;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use block::{FinedeepFfn, RoutingMode, SubLayer};
pub use error::{Error, Result};
pub use ffn::{DenseFfnParams, ExpertParams};
pub use model::{Arch, LmModel, ModelConfig};
pub use tensor::{Scalar, Tensor};
