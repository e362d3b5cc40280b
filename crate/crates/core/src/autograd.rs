//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass. Nodes only ever reference earlier
//! nodes, so the tape order is already topological and the backward sweep
//! is a single reverse walk over it. Graphs are not reused across passes.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Layout, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    CausalSoftmax(Var, T),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    Rotary { x: Var, head_dim: usize, theta: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
}

#[derive(Debug)]
struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for a single forward pass.
///
/// Leaves may borrow their tensors (`'a`) so that binding model parameters
/// does not copy them.
#[derive(Debug)]
pub struct Graph<'a, T: Scalar = f64> {
    nodes: Vec<Node<'a, T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiply-accumulates performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Differentiable leaf that owns its tensor.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Differentiable leaf borrowing an existing tensor.
    pub fn param_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        self.macs += (m * k * out.shape()[1]) as u64;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    /// Multiplies row `r` of `x` by the scalar `s[r]`; `s` has one entry per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.numel() != xv.rows() {
            return Err(Error::shape("scale_rows", xv.shape(), sv.shape()));
        }
        let cols = xv.cols();
        let mut out = xv.clone();
        for (row, &f) in out.data_mut().chunks_mut(cols).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push_op(out, Op::ScaleRows(x, s), &[x, s]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = tensor::silu(self.value(x));
        self.push_op(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        self.push_op(out, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::softmax_rows(self.value(x));
        self.push_op(out, Op::SoftmaxRows(x), &[x])
    }

    /// Row `p` becomes the softmax of `scale * x[p, 0..=p]`; later columns are 0.
    pub fn causal_softmax(&mut self, x: Var, scale: T) -> Result<Var> {
        let xv = self.value(x);
        let (t, s) = xv.require_matrix("causal_softmax")?;
        if s < t {
            return Err(Error::shape("causal_softmax", xv.shape(), &[t, t]));
        }
        let mut out = Tensor::zeros(&[t, s]);
        for p in 0..t {
            let src = &xv.row(p)[..=p];
            let dst = &mut out.data_mut()[p * s..p * s + p + 1];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * scale;
            }
            tensor::softmax_in_place(dst);
        }
        Ok(self.push_op(out, Op::CausalSoftmax(x, scale), &[x]))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (out, inv_rms) = tensor::rmsnorm_with_scale(self.value(x), self.value(gain), eps)?;
        Ok(self.push_op(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Selects rows of a `vocab x d` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = tv.require_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Input("gather_rows needs at least one id".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Input(format!("row id {id} out of range for table of {n} rows")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push_op(out, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.require_matrix("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push_op(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let rows = self.value(*first).require_matrix("concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).require_matrix("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::SumAll(x), &[x])
    }

    /// Rotary position encoding. Within every `head_dim`-wide column block,
    /// the pair `(2i, 2i+1)` of row `p` is rotated by `p * theta^(-2i/head_dim)`.
    pub fn rotary(&mut self, x: Var, head_dim: usize, theta: f64) -> Result<Var> {
        let xv = self.value(x);
        let (t, c) = xv.require_matrix("rotary")?;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || c % head_dim != 0 {
            return Err(Error::shape("rotary", xv.shape(), &[t, head_dim]));
        }
        let mut out = xv.clone();
        rotate_rows(out.data_mut(), c, head_dim, theta, false);
        Ok(self.push_op(out, Op::Rotary { x, head_dim, theta }, &[x]))
    }

    /// Mean next-token negative log-likelihood, a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::cross_entropy_with_probs(self.value(logits), targets)?;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push_op(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every differentiable leaf gets a gradient (zeros when `loss` does not
    /// depend on it). Intermediate gradients are released as the sweep passes.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g, &mut grads);
        }
        // Leaves after the loss on the tape cannot influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(Layout::Normal, Layout::Transposed, m, n, k, g.data(), bv.data(), ga.data_mut(), true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(Layout::Transposed, Layout::Normal, k, m, n, av.data(), g.data(), gb.data_mut(), true);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let gt = tensor::transpose(g).expect("2-d gradient");
                    ga.add_assign(&gt);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    zip_acc(ga, g, bv, |gi, bi| gi * bi);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    zip_acc(gb, g, av, |gi, ai| gi * ai);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += gi * c;
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let cols = xv.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dst, grow), &f) in gx.data_mut().chunks_mut(cols).zip(g.data().chunks(cols)).zip(sv.data()) {
                        for (d, &gi) in dst.iter_mut().zip(grow) {
                            *d += gi * f;
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    for ((d, grow), xrow) in gs.data_mut().iter_mut().zip(g.data().chunks(cols)).zip(xv.data().chunks(cols)) {
                        *d += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    zip_acc(gx, g, xv, |gi, xi| {
                        let s = tensor::sigmoid_scalar(xi);
                        gi * s * (T::one() + xi * (T::one() - s))
                    });
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    zip_acc(gx, g, out, |gi, yi| gi * yi * (T::one() - yi));
                }
            }
            Op::SoftmaxRows(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    softmax_backward(gx, g, out, T::one());
                }
            }
            Op::CausalSoftmax(x, scale) => {
                if let Some(gx) = self.slot(grads, *x) {
                    softmax_backward(gx, g, out, *scale);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gainv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let dn = T::of(d as f64);
                if let Some(gg) = self.slot(grads, *gain) {
                    let acc = gg.data_mut();
                    for ((grow, xrow), &r) in g.data().chunks(d).zip(xv.data().chunks(d)).zip(inv_rms) {
                        for ((a, &gi), &xi) in acc.iter_mut().zip(grow).zip(xrow) {
                            *a += gi * xi * r;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (((dst, grow), xrow), &r) in gx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(g.data().chunks(d))
                        .zip(xv.data().chunks(d))
                        .zip(inv_rms)
                    {
                        // u = g * gain, n = x * r; dx = (u - n * mean(u * n)) * r
                        let dot: T = grow
                            .iter()
                            .zip(gainv.data())
                            .zip(xrow)
                            .map(|((&gi, &wi), &xi)| gi * wi * xi * r)
                            .sum();
                        let mean = dot / dn;
                        for (((dv, &gi), &wi), &xi) in dst.iter_mut().zip(grow).zip(gainv.data()).zip(xrow) {
                            *dv += (gi * wi - xi * r * mean) * r;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let d = gt.cols();
                    for (grow, &id) in g.data().chunks(d).zip(ids) {
                        for (a, &gi) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(grow) {
                            *a += gi;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let (c, len) = (gx.cols(), g.cols());
                    for (dst, grow) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                        for (a, &gi) in dst[*start..*start + len].iter_mut().zip(grow) {
                            *a += gi;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for (dst, grow) in gp.data_mut().chunks_mut(c).zip(g.data().chunks(total)) {
                            for (a, &gi) in dst.iter_mut().zip(&grow[offset..offset + c]) {
                                *a += gi;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SumAll(x) => {
                let gs = g.data()[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|a| *a += gs);
                }
            }
            Op::Rotary { x, head_dim, theta } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let mut back = g.clone();
                    let c = back.cols();
                    rotate_rows(back.data_mut(), c, *head_dim, *theta, true);
                    gx.add_assign(&back);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let gs = g.data()[0] / T::of(targets.len() as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    let v = gl.cols();
                    for ((dst, prow), &t) in gl.data_mut().chunks_mut(v).zip(probs.data().chunks(v)).zip(targets) {
                        for (j, (a, &p)) in dst.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *a += (p - onehot) * gs;
                        }
                    }
                }
            }
        }
    }
}

fn zip_acc<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) {
    for ((a, &gi), &oi) in acc.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *a += f(gi, oi);
    }
}

fn rotate_rows<T: Scalar>(data: &mut [T], cols: usize, head_dim: usize, theta: f64, inverse: bool) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64)).collect();
    for (p, row) in data.chunks_mut(cols).enumerate() {
        let angles: Vec<(T, T)> = freqs
            .iter()
            .map(|&f| {
                let (s, c) = (p as f64 * f).sin_cos();
                (T::of(c), T::of(if inverse { -s } else { s }))
            })
            .collect();
        for head in row.chunks_mut(head_dim) {
            for (pair, &(c, s)) in head.chunks_mut(2).zip(&angles) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
}

fn softmax_backward<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>, y: &Tensor<T>, scale: T) {
    let n = y.cols();
    for ((dst, grow), yrow) in acc.data_mut().chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
        for ((d, &gi), &yi) in dst.iter_mut().zip(grow).zip(yrow) {
            *d += scale * yi * (gi - dot);
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a differentiable leaf. `None` for constants and
    /// intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of non-leaf operations the backward sweep processed.
    pub fn ops_visited(&self) -> usize {
        self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn bilinear_sum_gradient_is_other_factor() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let y = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.param_ref(&x);
        let yv = g.constant_ref(&y);
        let p = g.mul(xv, yv).unwrap();
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &y);
        assert!(grads.get(yv).is_none());
    }

    #[test]
    fn independent_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        let c = g.param(Tensor::full(&[1], 3.0));
        let loss = g.sum_all(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get(c).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        let y = g.silu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates_once_per_use() {
        // loss = sum(x * x) -> d/dx = 2x; each op is visited once.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_slice(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
        assert_eq!(grads.ops_visited(), 2);
    }

    #[test]
    fn matmul_macs_are_counted() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs(), 30);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 9.0, 9.0], [2.0, 2.0, 9.0], [0.0, 0.0, 0.0]]));
        let y = g.causal_softmax(x, 1.0).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
        assert!((v.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotary_preserves_norms_and_leaves_position_zero() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[5, 8], 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.constant_ref(&x);
        let y = g.rotary(xv, 4, 10_000.0).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.row(0), x.row(0));
        for p in 0..5 {
            for pair in 0..4 {
                let n0 = x.at(p, 2 * pair).powi(2) + x.at(p, 2 * pair + 1).powi(2);
                let n1 = yv.at(p, 2 * pair).powi(2) + yv.at(p, 2 * pair + 1).powi(2);
                assert!((n0 - n1).abs() < 1e-12);
            }
        }
        // Row 1, first pair: rotation by exactly 1 radian.
        let (s, c) = 1.0f64.sin_cos();
        let expect = x.at(1, 0) * c - x.at(1, 1) * s;
        assert!((yv.at(1, 0) - expect).abs() < 1e-15);
        assert!(g.rotary(xv, 3, 10.0).is_err());
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[3, 4], 0.7, &mut r);
        let b = Tensor::<f64>::randn(&[4, 3], 0.7, &mut r);
        let gain = Tensor::<f64>::randn(&[3], 1.0, &mut r).map(|v| v + 1.0);
        let w = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
        let params = vec![a, b, gain, w];
        let targets = [2usize, 0, 1];
        let report = check_gradients(
            &params,
            |g, p| {
                let ab = g.matmul(p[0], p[1])?;
                let n = g.rmsnorm(ab, p[2], 1e-5)?;
                let s = g.silu(n);
                let sg = g.sigmoid(s);
                let sm = g.softmax_rows(sg);
                let wt = g.transpose(p[3])?;
                let cs = g.causal_softmax(wt, 0.5)?;
                let mixed = g.matmul(cs, sm)?;
                let col = g.slice_cols(mixed, 1, 1)?;
                let scaled = g.scale_rows(n, col)?;
                let both = g.concat_cols(&[scaled, sm])?;
                let back = g.slice_cols(both, 0, 3)?;
                let sum = g.add(back, mixed)?;
                let emb = g.gather_rows(p[3], &[2, 0, 2])?;
                let prod0 = g.mul(sum, emb)?;
                let wide = g.concat_cols(&[prod0, n, sm, mixed])?;
                let rot = g.rotary(wide, 4, 10.0)?;
                let prod = g.slice_cols(rot, 2, 3)?;
                let z = g.scale(prod, 3.0);
                g.cross_entropy(z, &targets)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
