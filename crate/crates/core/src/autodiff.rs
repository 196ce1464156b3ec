//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation on a [`Var`]
//! evaluates eagerly and appends a node holding its value and enough saved
//! state to run its backward rule. Node ids are assigned in creation order, so
//! the tape is topologically sorted by construction and a single reverse sweep
//! visits every node once.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, gemm_nn, gemm_nt, gemm_tn, permute_data, Tensor};

/// Identifies a differentiable operation, for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    Gelu,
    Dropout,
    Softmax,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Reshape,
    Permute,
    Concat,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Gelu,
        OpKind::Dropout,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Embedding,
        OpKind::CrossEntropy,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Dropout => "dropout",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Embedding => "embedding",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

/// How a loss aggregates its per-position terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Gelu {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        scale: f64,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Sum {
        a: usize,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum { .. } => OpKind::Sum,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Gradient tape. Confined to one thread; build one per forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    consumed: Cell<bool>,
    sign_flip: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
            sign_flip: None,
        }
    }

    /// A tape that only evaluates values; nothing on it requires grad.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// A recording tape whose backward rule for `kind` has its sign flipped.
    /// Used to confirm that the gradient checker catches a broken rule.
    pub fn with_sign_flip(kind: OpKind) -> Self {
        Self {
            sign_flip: Some(kind),
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Binds a tensor as a leaf. It participates in gradients iff it requires grad.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let requires_grad = self.recording && tensor.requires_grad();
        self.push_raw(tensor.detached(), Op::Leaf, requires_grad)
    }

    /// Binds a value that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push_raw(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// Every node reachable from `loss` that requires grad ends up holding its
    /// accumulated gradient. The tape can be swept only once.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = &mut nodes[loss.id];
        if root.value.numel() != 1 {
            self.consumed.set(false);
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        root.grad = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(grad) = nodes[id].grad.take() else {
                continue;
            };
            let mut contributions = backward_rule(&nodes, id, &grad);
            if nodes[id].op.kind().is_some() && nodes[id].op.kind() == self.sign_flip {
                for (_, g) in &mut contributions {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
            }
            nodes[id].grad = Some(grad);
            for (input, g) in contributions {
                let node = &mut nodes[input];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by the last backward sweep, if any reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value"))
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    /// Batched matrix product `[..,M,K] · [..,K,N]`. Batch dimensions must be
    /// equal, or one side may be a plain matrix shared across the batch.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        let shape_err = || Error::Shape {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let a_batched = !ba.is_empty();
        let b_batched = !bb.is_empty();
        let batch_dims: Vec<usize> = match (a_batched, b_batched) {
            (true, true) if ba == bb => ba.to_vec(),
            (true, true) => return Err(shape_err()),
            (true, false) => ba.to_vec(),
            (false, true) => bb.to_vec(),
            (false, false) => Vec::new(),
        };
        let batch: usize = batch_dims.iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = if a_batched { bi * m * k } else { 0 };
            let b_off = if b_batched { bi * k * n } else { 0 };
            gemm_nn(
                &a.data()[a_off..a_off + m * k],
                &b.data()[b_off..b_off + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch_dims;
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        ))
    }

    fn broadcast_check(&self, other: &Var<'t>, op: &'static str) -> Result<(Tensor, Tensor)> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok((a, b))
    }

    /// Elementwise sum. `other` may have a shape equal to a suffix of `self`'s
    /// shape, in which case it is repeated over the leading dimensions.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = match self.broadcast_check(&other, "add") {
            Ok(pair) => pair,
            Err(e) => {
                // Addition commutes, so accept the broadcast operand on either side.
                return other.broadcast_check(&self, "add").map_err(|_| e).and_then(|_| other.add(self));
            }
        };
        let bn = b.numel().max(1);
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % bn])
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(value, Op::Add { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Elementwise product with the same broadcasting rule as [`Var::add`].
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = match self.broadcast_check(&other, "mul") {
            Ok(pair) => pair,
            Err(e) => {
                return other.broadcast_check(&self, "mul").map_err(|_| e).and_then(|_| other.mul(self));
            }
        };
        let bn = b.numel().max(1);
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * b.data()[i % bn])
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(value, Op::Mul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(value, Op::Scale { a: self.id, factor }, &[self.id])
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(value, Op::Gelu { a: self.id }, &[self.id])
    }

    /// Inverted dropout. Identity when `rng` is `None` (evaluation mode).
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: Option<&mut R>) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = rng else {
            return Ok(self);
        };
        if p == 0.0 {
            return Ok(self);
        }
        let a = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..a.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(value, Op::Dropout { a: self.id, mask }, &[self.id]))
    }

    /// Softmax along `axis`, max-subtracted. A slice that is entirely `-inf`
    /// (a fully masked attention row) yields zeros instead of NaN.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::Shape {
                op: "softmax",
                left: a.shape().to_vec(),
                right: vec![axis],
            });
        }
        let (outer, len, inner) = axis_extents(a.shape(), axis);
        let x = a.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.tape.push(
            value,
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
            &[self.id],
        ))
    }

    /// Layer normalization over the last dimension followed by an affine map.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let x = self.value();
        let (g, b) = (gain.value(), bias.value());
        let d = *x.shape().last().ok_or_else(|| Error::Shape {
            op: "layer_norm",
            left: vec![],
            right: g.shape().to_vec(),
        })?;
        for p in [&g, &b] {
            if p.shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: x.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let rows = if d == 0 { 0 } else { x.numel() / d };
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Gathers rows of a `[V,D]` table. Backward scatter-adds into the table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                left: table.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocab { id, vocab_size: v });
            }
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.tape.push(
            value,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Negative log-likelihood of `targets` under softmax of `[T,V]` logits.
    /// `None` targets are ignored in both value and gradient.
    pub fn cross_entropy(self, targets: &[Option<usize>], reduction: Reduction) -> Result<Var<'t>> {
        let logits = self.value();
        let s = logits.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![targets.len()],
            });
        }
        let (t_len, v) = (s[0], s[1]);
        if let Some(pos) = logits.data().iter().position(|x| x.is_nan()) {
            return Err(Error::NonFinite(format!("NaN logit at flat index {pos}")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![0.0; t_len * v];
        let mut total = 0.0;
        for (t, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= v {
                return Err(Error::OutOfVocab { id: y, vocab_size: v });
            }
            let row = &logits.data()[t * v..(t + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            total += log_z - row[y];
            for (p, x) in probs[t * v..(t + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let value = Tensor::scalar(total * scale);
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|a| a.reshaped(shape.to_vec()))?;
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..a.rank()).collect::<Vec<_>>() {
            return Err(Error::Shape {
                op: "permute",
                left: a.shape().to_vec(),
                right: perm.to_vec(),
            });
        }
        let (data, shape) = permute_data(a.data(), a.shape(), perm);
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.push(
            value,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: self.shape(),
                right: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.with_value(|a| a.data().iter().sum());
        self.tape.push(Tensor::scalar(total), Op::Sum { a: self.id }, &[self.id])
    }
}

/// Concatenates vars along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let values: Vec<Tensor> = parts.iter().map(|p| {
        first.same_tape(p);
        p.value()
    }).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::Shape {
            op: "concat",
            left: base,
            right: vec![axis],
        });
    }
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::Shape {
                op: "concat",
                left: base,
                right: s.to_vec(),
            });
        }
    }
    let (outer, _, inner) = axis_extents(&base, axis);
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let mut out = Vec::with_capacity(values.iter().map(Tensor::numel).sum());
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = lens.iter().sum();
    let value = Tensor::new(shape, out)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(
        value,
        Op::Concat {
            parts: ids.clone(),
            lens,
            outer,
            inner,
        },
        &ids,
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Sums a broadcast gradient back down to an operand of `len` elements.
fn reduce_broadcast(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    out
}

fn backward_rule(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => Vec::new(),
        &Op::MatMul {
            a,
            b,
            batch,
            a_batched,
            b_batched,
            m,
            k,
            n,
        } => {
            let (ad, bd) = (val(a).data(), val(b).data());
            let mut out = Vec::new();
            if wants(a) {
                let mut da = vec![0.0; val(a).numel()];
                for bi in 0..batch {
                    let a_off = if a_batched { bi * m * k } else { 0 };
                    let b_off = if b_batched { bi * k * n } else { 0 };
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bd[b_off..b_off + k * n],
                        &mut da[a_off..a_off + m * k],
                        m,
                        n,
                        k,
                    );
                }
                out.push((a, da));
            }
            if wants(b) {
                let mut db = vec![0.0; val(b).numel()];
                for bi in 0..batch {
                    let a_off = if a_batched { bi * m * k } else { 0 };
                    let b_off = if b_batched { bi * k * n } else { 0 };
                    gemm_tn(
                        &ad[a_off..a_off + m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut db[b_off..b_off + k * n],
                        k,
                        m,
                        n,
                    );
                }
                out.push((b, db));
            }
            out
        }
        &Op::Add { a, b } => {
            vec![(a, g.to_vec()), (b, reduce_broadcast(g, val(b).numel()))]
        }
        &Op::Mul { a, b } => {
            let (ad, bd) = (val(a).data(), val(b).data());
            let bn = bd.len().max(1);
            let da = g.iter().enumerate().map(|(i, gv)| gv * bd[i % bn]).collect();
            let gb: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
            vec![(a, da), (b, reduce_broadcast(&gb, bd.len()))]
        }
        &Op::Scale { a, factor } => vec![(a, g.iter().map(|v| v * factor).collect())],
        &Op::Gelu { a } => {
            let da = g
                .iter()
                .zip(val(a).data())
                .map(|(gv, &x)| gv * gelu_grad(x))
                .collect();
            vec![(a, da)]
        }
        Op::Dropout { a, mask } => vec![(*a, g.iter().zip(mask).map(|(gv, m)| gv * m).collect())],
        &Op::Softmax { a, outer, len, inner } => {
            let y = nodes[id].value.data();
            let mut da = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        da[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            vec![(a, da)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gd = val(*gain).data();
            let d = gd.len();
            let rows = inv_std.len();
            let mut dx = vec![0.0; xhat.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for c in 0..d {
                    let dh = gr[c] * gd[c];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[c];
                    dgain[c] += gr[c] * hr[c];
                    dbias[c] += gr[c];
                }
                mean_dh /= d as f64;
                mean_dh_h /= d as f64;
                for c in 0..d {
                    let dh = gr[c] * gd[c];
                    dx[r * d + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                }
            }
            vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
        }
        Op::Embedding { table, ids } => {
            let t = val(*table);
            let d = t.shape()[1];
            let mut dt = vec![0.0; t.numel()];
            for (row, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    dt[id * d + c] += g[row * d + c];
                }
            }
            vec![(*table, dt)]
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            scale,
        } => {
            let v = val(*logits).shape()[1];
            let mut dl = vec![0.0; probs.len()];
            let gs = g[0] * scale;
            for (t, target) in targets.iter().enumerate() {
                let Some(y) = *target else { continue };
                for c in 0..v {
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    dl[t * v + c] = gs * (probs[t * v + c] - onehot);
                }
            }
            vec![(*logits, dl)]
        }
        &Op::Reshape { a } => vec![(a, g.to_vec())],
        Op::Permute { a, perm } => {
            let out_shape = nodes[id].value.shape();
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (da, _) = permute_data(g, out_shape, &inverse);
            vec![(*a, da)]
        }
        Op::Concat {
            parts,
            lens,
            outer,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..*outer {
                let mut offset = o * total * inner;
                for (buf, &len) in grads.iter_mut().zip(lens) {
                    buf.extend_from_slice(&g[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            parts.iter().copied().zip(grads).collect()
        }
        &Op::Sum { a } => vec![(a, vec![g[0]; val(a).numel()])],
    }
}
