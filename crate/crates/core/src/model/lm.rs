//! Decoder-only language model: token embedding, `L` pre-norm layers of
//! causal attention followed by a dense or expert FFN, final norm, head.
//!
//! Positions enter through rotary rotations of queries and keys, so the
//! model has no positional parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::block::{finedeep_graph, FinedeepFfn, FinedeepVars, SubLayer, SubLayerVars};
use crate::error::{Error, Result};
use crate::ffn::{gated_ffn, DenseFfnParams, ExpertParams, GatedFfnVars};
use crate::model::config::{Arch, ModelConfig};
use crate::tensor::{self, Scalar, Tensor};

/// Base of the rotary frequency ladder.
pub const ROPE_THETA: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Scalar = f64> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnBlock<T: Scalar = f64> {
    /// `h + ffn(rmsnorm(h))`
    Dense { norm_gain: Tensor<T>, ffn: DenseFfnParams<T> },
    Finedeep(FinedeepFfn<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Scalar = f64> {
    pub attn_norm: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub ffn: FfnBlock<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmModel<T: Scalar = f64> {
    config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Tensor<T>,
    /// `d x vocab`; `None` when tied to the token embedding.
    pub head: Option<Tensor<T>>,
}

/// How a tensor is filled when a model is freshly initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone)]
pub enum FfnVars {
    Dense { norm: Var, ffn: GatedFfnVars },
    Finedeep(FinedeepVars),
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub attn: AttentionVars,
    pub ffn: FfnVars,
}

/// Graph handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub token_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Option<Var>,
    /// All of the above in canonical parameter order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record the silu activations of every FFN / expert.
    pub capture: bool,
    /// Skip the FFN blocks entirely (each becomes the identity).
    pub ablate_ffn: bool,
}

/// Silu activations of one layer. Dense layers have one entry holding the
/// single FFN; expert layers have one entry per sub-layer holding its `K`
/// expert activations in position order.
#[derive(Debug, Clone, Default)]
pub struct LayerActivations {
    pub sublayers: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    pub activations: Vec<LayerActivations>,
}

impl<T: Scalar> LmModel<T> {
    /// Seeded initialisation: Gaussian matrices with `init_std`, unit norm
    /// gains, zero routers.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let std = config.init_std;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::build(config, |_, shape, kind| {
            Ok(match kind {
                InitKind::Normal => Tensor::randn(shape, std, &mut rng),
                InitKind::Ones => Tensor::ones(shape),
                InitKind::Zeros => Tensor::zeros(shape),
            })
        })
    }

    /// Assembles a model, asking `source` for each tensor in canonical order.
    pub fn build<F>(config: &ModelConfig, mut source: F) -> Result<Self>
    where
        F: FnMut(&str, &[usize], InitKind) -> Result<Tensor<T>>,
    {
        config.validate()?;
        let config = config.clone().canonical();
        let (d, v, ff) = (config.hidden_size, config.vocab_size, config.intermediate_size);
        let mut take = |name: String, shape: &[usize], kind: InitKind| -> Result<Tensor<T>> {
            let t = source(&name, shape, kind)?;
            if t.shape() != shape {
                return Err(Error::shape("model tensor", shape, t.shape()));
            }
            Ok(t)
        };
        let token_embedding = take("tok_emb".into(), &[v, d], InitKind::Normal)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            let attn_norm = take(format!("{p}.attn_norm"), &[d], InitKind::Ones)?;
            let attn = AttentionParams {
                wq: take(format!("{p}.attn.wq"), &[d, d], InitKind::Normal)?,
                wk: take(format!("{p}.attn.wk"), &[d, d], InitKind::Normal)?,
                wv: take(format!("{p}.attn.wv"), &[d, d], InitKind::Normal)?,
                wo: take(format!("{p}.attn.wo"), &[d, d], InitKind::Normal)?,
            };
            let ffn = match config.arch {
                Arch::Dense => FfnBlock::Dense {
                    norm_gain: take(format!("{p}.ffn_norm"), &[d], InitKind::Ones)?,
                    ffn: DenseFfnParams::new(
                        take(format!("{p}.ffn.w_gate"), &[d, ff], InitKind::Normal)?,
                        take(format!("{p}.ffn.w_up"), &[d, ff], InitKind::Normal)?,
                        take(format!("{p}.ffn.w_down"), &[ff, d], InitKind::Normal)?,
                    )?,
                },
                Arch::Finedeep => {
                    let (m, k, de) = (config.sublayers, config.experts_per_sublayer, config.expert_size());
                    let mut sublayers = Vec::with_capacity(m);
                    for j in 0..m {
                        let s = format!("{p}.sub.{j}");
                        let norm = take(format!("{s}.norm"), &[d], InitKind::Ones)?;
                        let router = if config.router_enabled {
                            Some(take(format!("{s}.router"), &[d, k], InitKind::Zeros)?)
                        } else {
                            None
                        };
                        let mut experts = Vec::with_capacity(k);
                        for i in 0..k {
                            let e = format!("{s}.expert.{i}");
                            let weights = DenseFfnParams::new(
                                take(format!("{e}.w_gate"), &[d, de], InitKind::Normal)?,
                                take(format!("{e}.w_up"), &[d, de], InitKind::Normal)?,
                                take(format!("{e}.w_down"), &[de, d], InitKind::Normal)?,
                            )?;
                            experts.push(ExpertParams { weights, sublayer: j, position: i });
                        }
                        sublayers.push(SubLayer::new(experts, router, norm)?);
                    }
                    FfnBlock::Finedeep(FinedeepFfn::new(sublayers, config.routing_mode, config.rms_eps)?)
                }
            };
            layers.push(Layer { attn_norm, attn, ffn });
        }
        let final_norm = take("final_norm".into(), &[d], InitKind::Ones)?;
        let head = if config.tie_embeddings {
            None
        } else {
            Some(take("head".into(), &[d, v], InitKind::Normal)?)
        };
        Ok(Self { config, token_embedding, layers, final_norm, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.token_embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn_norm"), &layer.attn_norm));
            let a = &layer.attn;
            for (n, t) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                out.push((format!("{p}.attn.{n}"), t));
            }
            match &layer.ffn {
                FfnBlock::Dense { norm_gain, ffn } => {
                    out.push((format!("{p}.ffn_norm"), norm_gain));
                    push_triple(&mut out, &format!("{p}.ffn"), ffn);
                }
                FfnBlock::Finedeep(f) => {
                    for (j, s) in f.sublayers.iter().enumerate() {
                        out.push((format!("{p}.sub.{j}.norm"), &s.norm_gain));
                        if let Some(r) = &s.router {
                            out.push((format!("{p}.sub.{j}.router"), r));
                        }
                        for (i, e) in s.experts.iter().enumerate() {
                            push_triple(&mut out, &format!("{p}.sub.{j}.expert.{i}"), &e.weights);
                        }
                    }
                }
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            let a = &mut layer.attn;
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            match &mut layer.ffn {
                FfnBlock::Dense { norm_gain, ffn } => {
                    out.push(norm_gain);
                    out.extend(ffn.tensors_mut());
                }
                FfnBlock::Finedeep(f) => {
                    for s in &mut f.sublayers {
                        out.push(&mut s.norm_gain);
                        if let Some(r) = &mut s.router {
                            out.push(r);
                        }
                        for e in &mut s.experts {
                            out.extend(e.weights.tensors_mut());
                        }
                    }
                }
            }
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LmModel<U> {
        let mut src = self.named_tensors().into_iter();
        LmModel::build(&self.config, |_, _, _| Ok(src.next().expect("same layout").1.cast()))
            .expect("same config")
    }

    /// Records every parameter as a differentiable leaf, in canonical order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ModelVars {
        let leaves: Vec<Var> = self.named_tensors().into_iter().map(|(_, t)| g.param_ref(t)).collect();
        self.vars_from(&leaves).expect("one leaf per tensor")
    }

    /// Structures a flat list of graph handles given in canonical order.
    pub fn vars_from(&self, leaves: &[Var]) -> Result<ModelVars> {
        let expected = self.named_tensors().len();
        if leaves.len() != expected {
            return Err(Error::Contract(format!("expected {expected} parameter handles, got {}", leaves.len())));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let attn_norm = next();
            let attn = AttentionVars { wq: next(), wk: next(), wv: next(), wo: next() };
            let ffn = match &layer.ffn {
                FfnBlock::Dense { .. } => {
                    let norm = next();
                    FfnVars::Dense { norm, ffn: GatedFfnVars { w_gate: next(), w_up: next(), w_down: next() } }
                }
                FfnBlock::Finedeep(f) => {
                    let mut sublayers = Vec::with_capacity(f.sublayers.len());
                    for s in &f.sublayers {
                        let norm = next();
                        let router = s.router.as_ref().map(|_| next());
                        let experts = s
                            .experts
                            .iter()
                            .map(|_| GatedFfnVars { w_gate: next(), w_up: next(), w_down: next() })
                            .collect();
                        sublayers.push(SubLayerVars { experts, router, norm });
                    }
                    FfnVars::Finedeep(FinedeepVars { sublayers })
                }
            };
            layers.push(LayerVars { attn_norm, attn, ffn });
        }
        let final_norm = next();
        let head = self.head.as_ref().map(|_| next());
        Ok(ModelVars { token_embedding, layers, final_norm, head, params: leaves.to_vec() })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass for `tokens` and returns the `t x vocab` logits.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        vars: &ModelVars,
        tokens: &[usize],
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let eps = cfg.rms_eps;
        let mut h = g.gather_rows(vars.token_embedding, tokens)?;
        let mut activations = Vec::new();
        for lv in &vars.layers {
            let normed = g.rmsnorm(h, lv.attn_norm, eps)?;
            let attn = attention_graph(g, normed, &lv.attn, cfg.n_heads, Some(ROPE_THETA))?;
            h = g.add(h, attn)?;
            if opts.ablate_ffn {
                continue;
            }
            let acts = match &lv.ffn {
                FfnVars::Dense { norm, ffn } => {
                    let x = g.rmsnorm(h, *norm, eps)?;
                    let o = gated_ffn(g, x, ffn)?;
                    h = g.add(o.out, h)?;
                    vec![vec![o.act]]
                }
                FfnVars::Finedeep(fv) => {
                    let (out, acts) = finedeep_graph(g, h, fv, cfg.routing_mode, eps)?;
                    h = out;
                    acts
                }
            };
            if opts.capture {
                activations.push(LayerActivations { sublayers: acts });
            }
        }
        let normed = g.rmsnorm(h, vars.final_norm, eps)?;
        let logits = match vars.head {
            Some(head) => g.matmul(normed, head)?,
            None => {
                let emb_t = g.transpose(vars.token_embedding)?;
                g.matmul(normed, emb_t)?
            }
        };
        Ok(ForwardTrace { logits, activations })
    }

    /// Logits `t x vocab`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.forward_with(tokens, ForwardOptions::default())
    }

    pub fn forward_with(&self, tokens: &[usize], opts: ForwardOptions) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let trace = self.forward_graph(&mut g, &vars, tokens, opts)?;
        Ok(g.value(trace.logits).clone())
    }

    /// Records the mean next-token loss of a window: positions `0..n-1`
    /// predict tokens `1..n`.
    pub fn loss_graph(&self, g: &mut Graph<'_, T>, vars: &ModelVars, window: &[usize]) -> Result<Var> {
        if window.len() < 2 {
            return Err(Error::Input("a training window needs at least 2 tokens".into()));
        }
        let n = window.len();
        let trace = self.forward_graph(g, vars, &window[..n - 1], ForwardOptions::default())?;
        g.cross_entropy(trace.logits, &window[1..])
    }

    /// Loss of one window and its gradient for every parameter, in canonical order.
    pub fn loss_and_grads(&self, window: &[usize]) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let loss = self.loss_graph(&mut g, &vars, window)?;
        let value = g.value(loss).item()?.as_f64();
        let mut grads = g.backward(loss)?;
        let out = vars
            .params
            .iter()
            .map(|&v| grads.take(v).expect("every parameter is a differentiable leaf"))
            .collect();
        Ok((value, out))
    }
}

fn push_triple<'a, T: Scalar>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, p: &'a DenseFfnParams<T>) {
    for (n, t) in ["w_gate", "w_up", "w_down"].into_iter().zip(p.tensors()) {
        out.push((format!("{prefix}.{n}"), t));
    }
}

/// Multi-head causal self-attention over `x: t x d`. With `rope`, queries
/// and keys are rotated by position before the scores are formed.
pub fn attention_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    a: &AttentionVars,
    n_heads: usize,
    rope: Option<f64>,
) -> Result<Var> {
    let d = g.value(x).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!("hidden size {d} is not divisible by {n_heads} heads")));
    }
    let hd = d / n_heads;
    let mut q = g.matmul(x, a.wq)?;
    let mut k = g.matmul(x, a.wk)?;
    let v = g.matmul(x, a.wv)?;
    if let Some(theta) = rope {
        q = g.rotary(q, hd, theta)?;
        k = g.rotary(k, hd, theta)?;
    }
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * hd, hd)?, g.slice_cols(k, h * hd, hd)?, g.slice_cols(v, h * hd, hd)?)
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let probs = g.causal_softmax(scores, scale)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, a.wo)
}

/// Causal attention on concrete tensors.
pub fn causal_mha<T: Scalar>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
    n_heads: usize,
    rope: Option<f64>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant_ref(x);
    let a = AttentionVars {
        wq: g.constant_ref(&p.wq),
        wk: g.constant_ref(&p.wk),
        wv: g.constant_ref(&p.wv),
        wo: g.constant_ref(&p.wo),
    };
    let out = attention_graph(&mut g, xv, &a, n_heads, rope)?;
    Ok(g.value(out).clone())
}

/// Mean of `-log softmax(logits)[target]` over rows.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    Ok(tensor::cross_entropy(logits, targets)?.as_f64())
}
