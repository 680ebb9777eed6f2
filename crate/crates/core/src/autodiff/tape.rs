//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and enough cached
//! state to run its vector-Jacobian product. Parameters are read straight out
//! of the borrowed [`ParamStore`], so many tapes can share one model while it
//! stays immutable.

use std::collections::HashMap;
use std::fmt;

use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::autodiff::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which key positions each query row may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    /// Every key is visible.
    Full,
    /// Row `i` sees keys `0..=i`.
    Causal,
    /// Key `j` is visible to every row iff `keep[j]`.
    Keys(Vec<bool>),
}

impl Mask {
    fn keeps(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::Full => true,
            Mask::Causal => j <= i,
            Mask::Keys(keep) => keep[j],
        }
    }
}

/// How [`Tape::cross_entropy`] reduces over scored positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Operation kinds, used for diagnostics and backward-rule fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    AddBias,
    Add,
    Scale,
    Relu,
    RepeatRows,
    GatherRows,
    GroupMean,
    ConcatRows,
    LayerNorm,
    Attention,
    CrossEntropy,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::RepeatRows,
        OpKind::GatherRows,
        OpKind::GroupMean,
        OpKind::ConcatRows,
        OpKind::LayerNorm,
        OpKind::Attention,
        OpKind::CrossEntropy,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::RepeatRows => "repeat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::GroupMean => "group_mean",
            OpKind::ConcatRows => "concat_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Attention => "attention",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, S),
    Relu(Var),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        denom: S,
    },
    Sum(Var),
}

impl<S> Op<S> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::RepeatRows(_) => OpKind::RepeatRows,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::GroupMean(..) => OpKind::GroupMean,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Attention { .. } => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
        })
    }
}

enum Value<S> {
    Owned(Tensor<S>),
    Param(ParamId),
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Gradients produced by [`Tape::backward`]: one entry per parameter plus the
/// gradients of every leaf created with `requires_grad`.
pub struct Backward<S> {
    pub params: Gradients<S>,
    leaves: HashMap<Var, Tensor<S>>,
}

impl<S: Scalar> Backward<S> {
    /// Gradient of a differentiable leaf; `None` if the loss does not reach it.
    pub fn leaf(&self, var: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&var)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
    state: TapeState,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

fn shape_err(context: &str, expected: &[usize], got: &[usize]) -> AutodiffError {
    AutodiffError::Shape { context: context.to_string(), expected: expected.to_vec(), got: got.to_vec() }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            state: TapeState::Recording,
            grad_enabled: true,
            fault: None,
        }
    }

    /// A tape that evaluates values only; `backward` reports nothing reachable.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        let mut tape = Self::new(params);
        tape.grad_enabled = false;
        tape
    }

    /// Negates the vector-Jacobian product of every node of `kind`. Used by
    /// the verification suite to prove the gradient checks catch a bad rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can record a new step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.state = TapeState::Recording;
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        match &self.nodes[var.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input whose gradient is reported by [`Backward::leaf`].
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf. Repeated calls for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matrix_dims(&self, var: Var, context: &str) -> Result<(usize, usize), AutodiffError> {
        let shape = self.shape(var);
        if shape.len() != 2 {
            return Err(AutodiffError::Rank { context: context.to_string(), expected: 2, got: shape.to_vec() });
        }
        Ok((shape[0], shape[1]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err("matmul", &[k, n], &[k2, n]));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), self.value(a).data(), false, self.value(b).data(), false, S::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.matrix_dims(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", &[n], self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<S> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    /// Broadcasts a `[1, d]` row to `[rows, d]`.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var, AutodiffError> {
        let (r, d) = self.matrix_dims(x, "repeat_rows")?;
        if r != 1 {
            return Err(shape_err("repeat_rows", &[1, d], &[r, d]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::RepeatRows(x), &[x]))
    }

    /// Selects rows by index (duplicates allowed); embedding lookup and
    /// neighbor gathering both go through here.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let (r, d) = self.matrix_dims(x, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::Index { context: "gather_rows".into(), index: bad, len: r });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    /// Row `g` of the output is the mean of the input rows listed in `groups[g]`.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var, AutodiffError> {
        let (r, d) = self.matrix_dims(x, "group_mean")?;
        let src = self.value(x);
        let mut out = vec![S::zero(); groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(AutodiffError::EmptyGroup { group: g });
            }
            let inv = S::one() / S::from_usize(members.len()).expect("count fits");
            let dst = &mut out[g * d..(g + 1) * d];
            for &i in members {
                if i >= r {
                    return Err(AutodiffError::Index { context: "group_mean".into(), index: i, len: r });
                }
                for (o, &v) in dst.iter_mut().zip(src.row(i)) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(vec![groups.len(), d], out)?;
        Ok(self.push(value, Op::GroupMean(x, groups.to_vec()), &[x]))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let (_, d) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != d {
                return Err(shape_err("concat_rows", &[r, d], &[r, c]));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (m, d) = self.matrix_dims(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm gain/bias", &[d], self.shape(gain)));
        }
        let eps = S::from_f64_lossy(LAYER_NORM_EPS);
        let inv_d = S::one() / S::from_usize(d).expect("dim fits");
        let (src, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![S::zero(); m * d];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let r = S::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let xh = (row[j] - mean) * r;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![m, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries `[tq, d]`, keys `[tk, d]` and values `[tk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Mask) -> Result<Var, AutodiffError> {
        let (tq, d) = self.matrix_dims(q, "attention query")?;
        let (tk, dk) = self.matrix_dims(k, "attention key")?;
        let (tv, dv) = self.matrix_dims(v, "attention value")?;
        if dk != d || dv != d || tv != tk {
            return Err(shape_err("attention key/value", &[tk, d], &[tv, dv]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(AutodiffError::Heads { dim: d, heads });
        }
        if let Mask::Keys(keep) = mask {
            if keep.len() != tk {
                return Err(shape_err("attention key mask", &[tk], &[keep.len()]));
            }
        }
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).expect("dim fits").sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![S::zero(); heads * tq * tk];
        let mut out = vec![S::zero(); tq * d];
        let mut scores = vec![S::zero(); tk];
        for i in 0..tq {
            if !(0..tk).any(|j| mask.keeps(i, j)) {
                return Err(AutodiffError::DegenerateMask { row: i });
            }
            for h in 0..heads {
                let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                let mut max = S::neg_infinity();
                for j in 0..tk {
                    if mask.keeps(i, j) {
                        let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut total = S::zero();
                for j in 0..tk {
                    if mask.keeps(i, j) {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        total += e;
                    }
                }
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..tk {
                    if p[j] != S::zero() {
                        p[j] /= total;
                        let vj = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![tq, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Attention weights `[heads, tq, tk]` cached by an attention node.
    pub fn attention_weights(&self, var: Var) -> Option<&[S]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Softmax cross-entropy of `logits [t, vocab]` against `targets`;
    /// positions equal to `ignore` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
        reduction: Reduction,
    ) -> Result<Var, AutodiffError> {
        let (t, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(shape_err("cross_entropy targets", &[t], &[targets.len()]));
        }
        let mut scored = Vec::with_capacity(t);
        for (pos, &y) in targets.iter().enumerate() {
            if Some(y) == ignore {
                scored.push(None);
            } else if y >= vocab {
                return Err(AutodiffError::TargetOutOfRange { position: pos, target: y, vocab });
            } else {
                scored.push(Some(y));
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); t * vocab];
        let mut loss = S::zero();
        let mut count = 0usize;
        for (i, target) in scored.iter().enumerate() {
            let Some(y) = *target else { continue };
            let row = &src[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let total: S = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..vocab {
                probs[i * vocab + j] = (row[j] - lse).exp();
            }
            loss += lse - row[y];
            count += 1;
        }
        let denom = match reduction {
            Reduction::Mean if count > 0 => S::from_usize(count).expect("count fits"),
            _ => S::one(),
        };
        let value = Tensor::scalar(loss / denom);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: scored, probs, denom }, &[logits]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Runs reverse-mode accumulation from a single-element `loss`.
    ///
    /// The tape must be [`reset`](Tape::reset) before it can record and
    /// differentiate again.
    pub fn backward(&mut self, loss: Var) -> Result<Backward<S>, AutodiffError> {
        if self.state == TapeState::Consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward loss", &[], self.shape(loss)));
        }
        self.state = TapeState::Consumed;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Backward { params: Gradients::zeros_like(self.params), leaves: HashMap::new() };
        if !self.requires_grad(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), S::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.op.kind().is_some() && node.op.kind() == self.fault {
                g.scale_assign(-S::one());
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => out.params.accumulate(*id, &g),
                op => self.vjp(op, idx, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], var: Var, g: Tensor<S>) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn vjp(&self, op: &Op<S>, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<(), AutodiffError> {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by the caller"),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), gd, false, self.value(*b).data(), true, S::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(k, m, n, S::one(), self.value(*a).data(), true, gd, false, S::zero(), &mut db);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let n = g.cols();
                    let mut db = vec![S::zero(); n];
                    for row in gd.chunks(n.max(1)) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => {
                let mut gx = g.clone();
                gx.scale_assign(*s);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let out = self.value(Var(idx)).data();
                let gx: Vec<S> = gd.iter().zip(out).map(|(&gv, &o)| if o > S::zero() { gv } else { S::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::RepeatRows(x) => {
                let d = g.cols();
                let mut gx = vec![S::zero(); d];
                for row in gd.chunks(d.max(1)) {
                    for (acc, &v) in gx.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![1, d], gx)?);
            }
            Op::GatherRows(x, indices) => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x).to_vec();
                    let d = shape[1];
                    let mut gx = vec![S::zero(); shape[0] * d];
                    for (o, &i) in indices.iter().enumerate() {
                        for (acc, &v) in gx[i * d..(i + 1) * d].iter_mut().zip(&gd[o * d..(o + 1) * d]) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(shape, gx)?);
                }
            }
            Op::GroupMean(x, groups) => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x).to_vec();
                    let d = shape[1];
                    let mut gx = vec![S::zero(); shape[0] * d];
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = S::one() / S::from_usize(members.len()).expect("count fits");
                        for &i in members {
                            for (acc, &v) in gx[i * d..(i + 1) * d].iter_mut().zip(&gd[gi * d..(gi + 1) * d]) {
                                *acc += v * inv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(shape, gx)?);
                }
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    let slice = gd[offset * d..(offset + r) * d].to_vec();
                    self.accumulate(grads, p, Tensor::new(vec![r, d], slice)?);
                    offset += r;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = g.cols();
                let m = g.rows();
                let gain_v = self.value(*gain).data();
                let inv_d = S::one() / S::from_usize(d).expect("dim fits");
                let mut dx = vec![S::zero(); m * d];
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                for i in 0..m {
                    let gy = &gd[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    let mut sum_dxh = S::zero();
                    let mut sum_dxh_xh = S::zero();
                    for j in 0..d {
                        let dxh = gy[j] * gain_v[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        dgain[j] += gy[j] * xh[j];
                        dbias[j] += gy[j];
                    }
                    for j in 0..d {
                        let dxh = gy[j] * gain_v[j];
                        dx[i * d + j] = rstd[i] * (dxh - sum_dxh * inv_d - xh[j] * sum_dxh_xh * inv_d);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, d], dx)?);
                self.accumulate(grads, *gain, Tensor::new(vec![d], dgain)?);
                self.accumulate(grads, *bias, Tensor::new(vec![d], dbias)?);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let tk = self.shape(*k)[0];
                let dh = d / heads;
                let scale = S::one() / S::from_usize(dh).expect("dim fits").sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![S::zero(); tq * d];
                let mut dk = vec![S::zero(); tk * d];
                let mut dv = vec![S::zero(); tk * d];
                let mut dp = vec![S::zero(); tk];
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..tq {
                        let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                        let go = &gd[i * d + cols.start..i * d + cols.end];
                        let mut weighted = S::zero();
                        for j in 0..tk {
                            if p[j] == S::zero() {
                                dp[j] = S::zero();
                                continue;
                            }
                            let vj = &vd[j * d + cols.start..j * d + cols.end];
                            dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            weighted += p[j] * dp[j];
                            for (acc, &gv) in dv[j * d + cols.start..j * d + cols.end].iter_mut().zip(go) {
                                *acc += p[j] * gv;
                            }
                        }
                        for j in 0..tk {
                            if p[j] == S::zero() {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            for c in cols.clone() {
                                dq[i * d + c] += ds * kd[j * d + c];
                                dk[j * d + c] += ds * qd[i * d + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(vec![tq, d], dq)?);
                self.accumulate(grads, *k, Tensor::new(vec![tk, d], dk)?);
                self.accumulate(grads, *v, Tensor::new(vec![tk, d], dv)?);
            }
            Op::CrossEntropy { logits, targets, probs, denom } => {
                let vocab = self.shape(*logits)[1];
                let scale = g.item() / *denom;
                let mut dl = vec![S::zero(); targets.len() * vocab];
                for (i, target) in targets.iter().enumerate() {
                    let Some(y) = *target else { continue };
                    for j in 0..vocab {
                        dl[i * vocab + j] = probs[i * vocab + j] * scale;
                    }
                    dl[i * vocab + y] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![targets.len(), vocab], dl)?);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
        }
        Ok(())
    }
}
