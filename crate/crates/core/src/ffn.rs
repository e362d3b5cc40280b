//! Gated feed-forward network and its partition into fine-grained experts.
//!
//! An FFN computes `(silu(h W_g) ⊙ h W_up) W_down`. Slicing the three
//! matrices along the intermediate dimension yields experts with the same
//! gated form at reduced width; the experts' outputs sum to the dense output.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gate/up/down projections of one gated FFN. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFfnParams<T: Scalar = f64> {
    /// `d x d_ff`
    pub w_gate: Tensor<T>,
    /// `d x d_ff`
    pub w_up: Tensor<T>,
    /// `d_ff x d`
    pub w_down: Tensor<T>,
}

impl<T: Scalar> DenseFfnParams<T> {
    pub fn new(w_gate: Tensor<T>, w_up: Tensor<T>, w_down: Tensor<T>) -> Result<Self> {
        let (d, ff) = w_gate.require_matrix("ffn.w_gate")?;
        if w_up.shape() != [d, ff] {
            return Err(Error::shape("ffn.w_up", w_gate.shape(), w_up.shape()));
        }
        if w_down.shape() != [ff, d] {
            return Err(Error::shape("ffn.w_down", &[ff, d], w_down.shape()));
        }
        Ok(Self { w_gate, w_up, w_down })
    }

    pub fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_gate: Tensor::randn(&[d, d_ff], std, rng),
            w_up: Tensor::randn(&[d, d_ff], std, rng),
            w_down: Tensor::randn(&[d_ff, d], std, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn intermediate_size(&self) -> usize {
        self.w_gate.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 3] {
        [&self.w_gate, &self.w_up, &self.w_down]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.w_gate, &mut self.w_up, &mut self.w_down]
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> GatedFfnVars {
        GatedFfnVars {
            w_gate: g.param_ref(&self.w_gate),
            w_up: g.param_ref(&self.w_up),
            w_down: g.param_ref(&self.w_down),
        }
    }
}

/// One slice of a dense FFN, placed at `(sublayer, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T: Scalar = f64> {
    pub weights: DenseFfnParams<T>,
    /// Zero-based sub-layer `j`.
    pub sublayer: usize,
    /// Zero-based position `i` within the sub-layer.
    pub position: usize,
}

impl<T: Scalar> ExpertParams<T> {
    /// Zero-based global index `j * K + i`, i.e. the order of the slice in
    /// the dense intermediate dimension.
    pub fn global_index(&self, experts_per_sublayer: usize) -> usize {
        self.sublayer * experts_per_sublayer + self.position
    }

    pub fn expert_size(&self) -> usize {
        self.weights.intermediate_size()
    }
}

/// Graph handles for a gate/up/down triple.
#[derive(Debug, Clone, Copy)]
pub struct GatedFfnVars {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Output of [`gated_ffn`]: the projected result and the silu activations
/// that feed the elementwise product.
#[derive(Debug, Clone, Copy)]
pub struct GatedFfnOutput {
    pub out: Var,
    pub act: Var,
}

pub fn gated_ffn<T: Scalar>(g: &mut Graph<'_, T>, h: Var, w: &GatedFfnVars) -> Result<GatedFfnOutput> {
    let gate = g.matmul(h, w.w_gate)?;
    let act = g.silu(gate);
    let up = g.matmul(h, w.w_up)?;
    let mixed = g.mul(act, up)?;
    let out = g.matmul(mixed, w.w_down)?;
    Ok(GatedFfnOutput { out, act })
}

/// Dense FFN applied to every row of `h: t x d`.
pub fn ffn_forward<T: Scalar>(h: &Tensor<T>, p: &DenseFfnParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant_ref(h);
    let w = GatedFfnVars {
        w_gate: g.constant_ref(&p.w_gate),
        w_up: g.constant_ref(&p.w_up),
        w_down: g.constant_ref(&p.w_down),
    };
    let out = gated_ffn(&mut g, x, &w)?.out;
    Ok(g.value(out).clone())
}

pub fn expert_forward<T: Scalar>(h: &Tensor<T>, e: &ExpertParams<T>) -> Result<Tensor<T>> {
    ffn_forward(h, &e.weights)
}

/// Splits the intermediate dimension into `m * k` contiguous blocks.
///
/// The returned experts are in global-index order: expert `g` owns
/// intermediate units `g * d_e .. (g + 1) * d_e` and sits at sub-layer
/// `g / k`, position `g % k`.
pub fn partition_ffn<T: Scalar>(p: &DenseFfnParams<T>, m: usize, k: usize) -> Result<Vec<ExpertParams<T>>> {
    let d_ff = p.intermediate_size();
    let d_e = expert_size(d_ff, m, k)?;
    (0..m * k)
        .map(|gi| {
            let start = gi * d_e;
            Ok(ExpertParams {
                weights: DenseFfnParams {
                    w_gate: p.w_gate.slice_cols(start, d_e)?,
                    w_up: p.w_up.slice_cols(start, d_e)?,
                    w_down: p.w_down.slice_rows(start, d_e)?,
                },
                sublayer: gi / k,
                position: gi % k,
            })
        })
        .collect()
}

/// Intermediate width of each expert, `d_ff / (m * k)`.
pub fn expert_size(d_ff: usize, m: usize, k: usize) -> Result<usize> {
    if m == 0 || k == 0 || !d_ff.is_multiple_of(m * k) {
        return Err(Error::Config(format!(
            "intermediate size d_ff={d_ff} is not divisible by M*K with M={m}, K={k}"
        )));
    }
    Ok(d_ff / (m * k))
}

/// Inverse of [`partition_ffn`]: concatenates experts given in global-index
/// order back into dense matrices.
pub fn reassemble_ffn<T: Scalar>(experts: &[&DenseFfnParams<T>]) -> Result<DenseFfnParams<T>> {
    let gates: Vec<&Tensor<T>> = experts.iter().map(|e| &e.w_gate).collect();
    let ups: Vec<&Tensor<T>> = experts.iter().map(|e| &e.w_up).collect();
    let downs: Vec<&Tensor<T>> = experts.iter().map(|e| &e.w_down).collect();
    DenseFfnParams::new(Tensor::hcat(&gates)?, Tensor::hcat(&ups)?, Tensor::vcat(&downs)?)
}
