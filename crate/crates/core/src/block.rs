//! Multi-sub-layer expert arrangement with output-guided routing.
//!
//! Each sub-layer normalises its input, runs its `K` experts on the
//! normalised vector, weights each expert output by a score computed from
//! that same output, and adds the weighted sum back onto its input. The
//! `M` sub-layers are applied in sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ffn::{gated_ffn, partition_ffn, DenseFfnParams, ExpertParams, GatedFfnVars};
use crate::tensor::{Scalar, Tensor};

/// How expert logits become weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Independent `sigmoid(logit)` per expert.
    #[default]
    Sigmoid,
    /// Softmax across the experts of a sub-layer.
    Softmax,
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RoutingMode::Sigmoid => "sigmoid",
            RoutingMode::Softmax => "softmax",
        })
    }
}

/// `K` experts, their router and the pre-expert norm gain.
#[derive(Debug, Clone, PartialEq)]
pub struct SubLayer<T: Scalar = f64> {
    pub experts: Vec<ExpertParams<T>>,
    /// `d x K`; column `i` scores expert `i`. `None` only when `K == 1`, in
    /// which case the single expert output is used unweighted.
    pub router: Option<Tensor<T>>,
    pub norm_gain: Tensor<T>,
}

impl<T: Scalar> SubLayer<T> {
    pub fn new(experts: Vec<ExpertParams<T>>, router: Option<Tensor<T>>, norm_gain: Tensor<T>) -> Result<Self> {
        let k = experts.len();
        let first = experts.first().ok_or_else(|| Error::Config("sub-layer needs at least one expert".into()))?;
        let d = first.weights.hidden_size();
        let d_e = first.expert_size();
        for e in &experts {
            if e.weights.hidden_size() != d || e.expert_size() != d_e {
                return Err(Error::shape("sub-layer experts", first.weights.w_gate.shape(), e.weights.w_gate.shape()));
            }
        }
        match &router {
            Some(r) if r.shape() != [d, k] => return Err(Error::shape("router", &[d, k], r.shape())),
            None if k != 1 => {
                return Err(Error::Config(format!("router can only be disabled with one expert, got K={k}")))
            }
            _ => {}
        }
        if norm_gain.shape() != [d] {
            return Err(Error::shape("sub-layer norm", &[d], norm_gain.shape()));
        }
        Ok(Self { experts, router, norm_gain })
    }

    pub fn experts_per_sublayer(&self) -> usize {
        self.experts.len()
    }

    pub fn router_enabled(&self) -> bool {
        self.router.is_some()
    }

    pub fn hidden_size(&self) -> usize {
        self.norm_gain.numel()
    }

    pub fn expert_size(&self) -> usize {
        self.experts[0].expert_size()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> SubLayerVars {
        let norm = g.param_ref(&self.norm_gain);
        let router = self.router.as_ref().map(|r| g.param_ref(r));
        let experts = self.experts.iter().map(|e| e.weights.bind(g)).collect();
        SubLayerVars { experts, router, norm }
    }
}

/// Sequence of sub-layers replacing one FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct FinedeepFfn<T: Scalar = f64> {
    pub sublayers: Vec<SubLayer<T>>,
    pub routing: RoutingMode,
    pub eps: f64,
}

impl<T: Scalar> FinedeepFfn<T> {
    pub fn new(sublayers: Vec<SubLayer<T>>, routing: RoutingMode, eps: f64) -> Result<Self> {
        let first = sublayers.first().ok_or_else(|| Error::Config("need at least one sub-layer".into()))?;
        for s in &sublayers {
            if s.hidden_size() != first.hidden_size() || s.expert_size() != first.expert_size() {
                return Err(Error::Config("all sub-layers must share hidden and expert sizes".into()));
            }
        }
        Ok(Self { sublayers, routing, eps })
    }

    /// Fresh block: Gaussian experts, zero routers, unit norm gains.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        d_ff: usize,
        m: usize,
        k: usize,
        routing: RoutingMode,
        router_enabled: bool,
        eps: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let dense = DenseFfnParams::init(d, d_ff, std, rng);
        Self::from_dense(&dense, m, k, routing, router_enabled, Tensor::ones(&[d]), eps)
    }

    /// Partitions `dense` into `m x k` experts. `first_norm` becomes the
    /// first sub-layer's gain; later sub-layers start at 1 and all routers at 0.
    pub fn from_dense(
        dense: &DenseFfnParams<T>,
        m: usize,
        k: usize,
        routing: RoutingMode,
        router_enabled: bool,
        first_norm: Tensor<T>,
        eps: f64,
    ) -> Result<Self> {
        if !router_enabled && k != 1 {
            return Err(Error::Config(format!("router can only be disabled with one expert, got K={k}")));
        }
        let d = dense.hidden_size();
        let mut experts = partition_ffn(dense, m, k)?.into_iter();
        let mut sublayers = Vec::with_capacity(m);
        for j in 0..m {
            let group: Vec<_> = experts.by_ref().take(k).collect();
            let router = router_enabled.then(|| Tensor::zeros(&[d, k]));
            let norm = if j == 0 { first_norm.clone() } else { Tensor::ones(&[d]) };
            sublayers.push(SubLayer::new(group, router, norm)?);
        }
        Self::new(sublayers, routing, eps)
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> FinedeepVars {
        FinedeepVars { sublayers: self.sublayers.iter().map(|s| s.bind(g)).collect() }
    }

    /// Experts of every sub-layer in global-index order.
    pub fn experts(&self) -> impl Iterator<Item = &ExpertParams<T>> {
        self.sublayers.iter().flat_map(|s| s.experts.iter())
    }
}

#[derive(Debug, Clone)]
pub struct SubLayerVars {
    pub experts: Vec<GatedFfnVars>,
    pub router: Option<Var>,
    pub norm: Var,
}

#[derive(Debug, Clone)]
pub struct FinedeepVars {
    pub sublayers: Vec<SubLayerVars>,
}

/// Per-expert routing weights, each `t x 1`, from expert outputs `t x d`
/// and the router columns.
pub fn route_scores_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    outputs: &[Var],
    router: Var,
    mode: RoutingMode,
) -> Result<Vec<Var>> {
    let k = outputs.len();
    let rshape = g.value(router).shape().to_vec();
    if rshape.len() != 2 || rshape[1] != k {
        return Err(Error::shape("route_scores", &rshape, &[g.value(outputs[0]).cols(), k]));
    }
    let mut logits = Vec::with_capacity(k);
    for (i, &out) in outputs.iter().enumerate() {
        let col = g.slice_cols(router, i, 1)?;
        logits.push(g.matmul(out, col)?);
    }
    match mode {
        RoutingMode::Sigmoid => Ok(logits.into_iter().map(|l| g.sigmoid(l)).collect()),
        RoutingMode::Softmax => {
            let stacked = g.concat_cols(&logits)?;
            let probs = g.softmax_rows(stacked);
            (0..k).map(|i| g.slice_cols(probs, i, 1)).collect()
        }
    }
}

/// Routing scores `t x K` for concrete expert outputs.
pub fn route_scores<T: Scalar>(outputs: &[Tensor<T>], router: &Tensor<T>, mode: RoutingMode) -> Result<Tensor<T>> {
    if outputs.is_empty() {
        return Err(Error::Input("route_scores needs at least one expert output".into()));
    }
    let mut g = Graph::new();
    let outs: Vec<Var> = outputs.iter().map(|o| g.constant_ref(o)).collect();
    let r = g.constant_ref(router);
    let scores = route_scores_graph(&mut g, &outs, r, mode)?;
    let parts: Vec<&Tensor<T>> = scores.iter().map(|&s| g.value(s)).collect();
    Tensor::hcat(&parts)
}

/// Output of one sub-layer plus the silu activations of each of its experts.
#[derive(Debug, Clone)]
pub struct SubLayerOutput {
    pub out: Var,
    pub expert_acts: Vec<Var>,
}

pub fn sublayer_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    h_in: Var,
    s: &SubLayerVars,
    mode: RoutingMode,
    eps: f64,
) -> Result<SubLayerOutput> {
    let normed = g.rmsnorm(h_in, s.norm, eps)?;
    let mut outs = Vec::with_capacity(s.experts.len());
    let mut acts = Vec::with_capacity(s.experts.len());
    for e in &s.experts {
        let o = gated_ffn(g, normed, e)?;
        outs.push(o.out);
        acts.push(o.act);
    }
    let weighted = match s.router {
        Some(router) => {
            let scores = route_scores_graph(g, &outs, router, mode)?;
            outs.iter()
                .zip(&scores)
                .map(|(&o, &sc)| g.scale_rows(o, sc))
                .collect::<Result<Vec<_>>>()?
        }
        None => outs,
    };
    let mut acc = weighted[0];
    for &w in &weighted[1..] {
        acc = g.add(acc, w)?;
    }
    let out = g.add(acc, h_in)?;
    Ok(SubLayerOutput { out, expert_acts: acts })
}

/// Folds [`sublayer_graph`] over all sub-layers, returning the final hidden
/// state and each sub-layer's expert activations.
pub fn finedeep_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    h0: Var,
    vars: &FinedeepVars,
    mode: RoutingMode,
    eps: f64,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let mut h = h0;
    let mut acts = Vec::with_capacity(vars.sublayers.len());
    for s in &vars.sublayers {
        let o = sublayer_graph(g, h, s, mode, eps)?;
        h = o.out;
        acts.push(o.expert_acts);
    }
    Ok((h, acts))
}

fn bind_constants<'a, T: Scalar>(g: &mut Graph<'a, T>, s: &'a SubLayer<T>) -> SubLayerVars {
    let norm = g.constant_ref(&s.norm_gain);
    let router = s.router.as_ref().map(|r| g.constant_ref(r));
    let experts = s
        .experts
        .iter()
        .map(|e| GatedFfnVars {
            w_gate: g.constant_ref(&e.weights.w_gate),
            w_up: g.constant_ref(&e.weights.w_up),
            w_down: g.constant_ref(&e.weights.w_down),
        })
        .collect();
    SubLayerVars { experts, router, norm }
}

pub fn sublayer_forward<T: Scalar>(h_in: &Tensor<T>, s: &SubLayer<T>, mode: RoutingMode, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant_ref(h_in);
    let vars = bind_constants(&mut g, s);
    let out = sublayer_graph(&mut g, x, &vars, mode, eps)?.out;
    Ok(g.value(out).clone())
}

pub fn finedeep_ffn_forward<T: Scalar>(h0: &Tensor<T>, f: &FinedeepFfn<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant_ref(h0);
    let vars = FinedeepVars { sublayers: f.sublayers.iter().map(|s| bind_constants(&mut g, s)).collect() };
    let (out, _) = finedeep_graph(&mut g, x, &vars, f.routing, f.eps)?;
    Ok(g.value(out).clone())
}
