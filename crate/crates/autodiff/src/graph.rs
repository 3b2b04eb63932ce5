//! Computation tape and the differentiable operation set.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so inputs always precede their consumers and
//! `backward` walks the node list in exact reverse insertion order.

use crate::error::{AutodiffError, Result};
use crate::real::{gemm, MatView, Real};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m, k] @ [k, n]`.
    MatMul,
    /// `a + b` with `b` broadcast into the shape of `a`.
    Add,
    Sub,
    Mul,
    Div,
    /// Multiply by a constant.
    Scale(f64),
    Softmax { axis: usize },
    /// Softmax over the last axis with non-negative per-column weights
    /// (second input). Zero-weight columns receive exactly zero probability.
    MaskedSoftmax,
    LogSoftmax { axis: usize },
    Sigmoid,
    /// Tanh approximation.
    Gelu,
    Relu,
    Square,
    Log,
    /// Normalize over the last axis, then scale and shift (inputs: x, gamma, beta).
    LayerNorm { eps: f64 },
    Transpose,
    Reshape(Vec<usize>),
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    GatherRows(Vec<usize>),
    Concat { axis: usize },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    /// Euclidean norm over the last axis.
    L2Norm,
    /// Forward value of the second input, gradient routed to the first.
    StraightThrough,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Softmax { .. } => "softmax",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::LogSoftmax { .. } => "log_softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Square => "square",
            OpKind::Log => "log",
            OpKind::LayerNorm { .. } => "layernorm",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Concat { .. } => "concat",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::L2Norm => "l2_norm",
            OpKind::StraightThrough => "straight_through",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MaskedSoftmax
            | OpKind::StraightThrough => Some(2),
            OpKind::LayerNorm { .. } => Some(3),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

enum Saved<F> {
    None,
    LayerNorm { xhat: Vec<F>, rstd: Vec<F> },
    MaskedSoftmax { ez: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    requires_grad: bool,
    saved: Saved<F>,
    grad: Option<Vec<F>>,
}

/// Reverse-mode tape. Confined to one thread; create one per forward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// How a flat index into `a` maps onto the broadcast operand `b`.
enum Broadcast {
    Same,
    Scalar,
    Cyclic(usize),
    Repeat(usize),
    General(Vec<usize>),
}

impl Broadcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if numel(b) == 1 {
            return Ok(Broadcast::Scalar);
        }
        if b.len() > a.len() {
            return Err(mismatch(op, format!("cannot broadcast {:?} into {:?}", b, a)));
        }
        let offset = a.len() - b.len();
        let mut padded = vec![1usize; offset];
        padded.extend_from_slice(b);
        for (da, db) in a.iter().zip(&padded) {
            if db != da && *db != 1 {
                return Err(mismatch(op, format!("cannot broadcast {:?} into {:?}", b, a)));
            }
        }
        // Trailing block of `a` equal to `b` after leading ones.
        let first_real = padded.iter().position(|&d| d != 1).unwrap_or(padded.len());
        if padded[first_real..] == a[first_real..] {
            return Ok(Broadcast::Cyclic(numel(b)));
        }
        // Leading block equal, trailing ones.
        let last_real = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if padded[..last_real] == a[..last_real] && padded[last_real..].iter().all(|&d| d == 1) {
            return Ok(Broadcast::Repeat(a[last_real..].iter().product()));
        }
        let mut strides = vec![0usize; a.len()];
        let mut s = 1;
        for i in (0..a.len()).rev() {
            if padded[i] != 1 {
                strides[i] = s;
                s *= padded[i];
            }
        }
        let total = numel(a);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; a.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..a.len()).rev() {
                idx[d] += 1;
                if idx[d] < a[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Broadcast::General(map))
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Cyclic(n) => i % n,
            Broadcast::Repeat(inner) => i / inner,
            Broadcast::General(m) => m[i],
        }
    }
}

fn stable_sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_COEF: f64 = 0.044715;

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(GELU_COEF);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x);
    (y, dy)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            kind: None,
            inputs: Vec::new(),
            requires_grad,
            saved: Saved::None,
            grad: if requires_grad { Some(Vec::new()) } else { None },
        })
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// A non-differentiable copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, node: Node<F>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` for leaves without grad state
    /// and for intermediate nodes.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        if node.kind.is_some() {
            return None;
        }
        node.grad.as_ref().map(|g| {
            let data = if g.is_empty() { vec![F::zero(); node.value.numel()] } else { g.clone() };
            Tensor::new(node.value.shape().to_vec(), data).expect("grad shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if node.kind.is_none() && node.requires_grad {
                node.grad = Some(Vec::new());
            }
        }
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(AutodiffError::Unsupported(format!(
                    "{} takes {} inputs, got {}",
                    kind.name(),
                    n,
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(AutodiffError::Unsupported(format!("{} needs at least one input", kind.name())));
        }
        let refs: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&kind, &refs)?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            kind: Some(kind),
            inputs: inputs.to_vec(),
            requires_grad,
            saved: if requires_grad { saved } else { Saved::None },
            grad: None,
        }))
    }

    /// Populates leaf gradients with d(root)/d(leaf). Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let root_shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_shape.to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<F>>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(kind) = node.kind.as_ref() else {
                let node = &mut self.nodes[i];
                let acc = node.grad.get_or_insert_with(Vec::new);
                if acc.is_empty() {
                    *acc = g;
                } else {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
                }
                continue;
            };
            let inputs: Vec<&Tensor<F>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let grads = backward_op(kind, &inputs, &node.value, &node.saved, &g, &needs);
            for ((input, grad), need) in node.inputs.clone().into_iter().zip(grads).zip(needs) {
                let (Some(grad), true) = (grad, need) else { continue };
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    // Convenience wrappers. Each panics only through `apply`'s error path.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Softmax { axis }, &[a])
    }
    pub fn masked_softmax(&mut self, a: Var, weights: Var) -> Result<Var> {
        self.apply(OpKind::MaskedSoftmax, &[a, weights])
    }
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::LogSoftmax { axis }, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNorm { eps }, &[x, gamma, beta])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.apply(OpKind::GatherRows(rows.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(OpKind::Sum { axis }, &[a])
    }
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(OpKind::Mean { axis }, &[a])
    }
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::L2Norm, &[a])
    }
    pub fn straight_through(&mut self, soft: Var, hard: Var) -> Result<Var> {
        self.apply(OpKind::StraightThrough, &[soft, hard])
    }
}

fn require_rank<F>(op: &'static str, t: &Tensor<F>, rank: usize) -> Result<()>
where
    F: Real,
{
    if t.rank() != rank {
        return Err(mismatch(op, format!("expected rank {}, got shape {:?}", rank, t.shape())));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(mismatch(op, format!("axis {} out of range for {:?}", axis, shape)));
    }
    Ok(())
}

fn forward<F: Real>(kind: &OpKind, x: &[&Tensor<F>]) -> Result<(Tensor<F>, Saved<F>)> {
    let op = kind.name();
    let plain = |shape: Vec<usize>, data: Vec<F>| Ok((Tensor::new(shape, data)?, Saved::None));
    match kind {
        OpKind::MatMul => {
            require_rank(op, x[0], 2)?;
            require_rank(op, x[1], 2)?;
            let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
            let (k2, n) = (x[1].shape()[0], x[1].shape()[1]);
            if k != k2 {
                return Err(mismatch(op, format!("{:?} @ {:?}", x[0].shape(), x[1].shape())));
            }
            let mut out = vec![F::zero(); m * n];
            gemm(x[0].data(), MatView::new(m, k), x[1].data(), MatView::new(k, n), &mut out, false);
            plain(vec![m, n], out)
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let bc = Broadcast::plan(op, x[0].shape(), x[1].shape())?;
            let (a, b) = (x[0].data(), x[1].data());
            let out: Vec<F> = match kind {
                OpKind::Add => a.iter().enumerate().map(|(i, &v)| v + b[bc.index(i)]).collect(),
                OpKind::Sub => a.iter().enumerate().map(|(i, &v)| v - b[bc.index(i)]).collect(),
                OpKind::Div => a.iter().enumerate().map(|(i, &v)| v / b[bc.index(i)]).collect(),
                _ => a.iter().enumerate().map(|(i, &v)| v * b[bc.index(i)]).collect(),
            };
            plain(x[0].shape().to_vec(), out)
        }
        OpKind::Scale(c) => {
            let c = F::of(*c);
            plain(x[0].shape().to_vec(), x[0].data().iter().map(|&v| v * c).collect())
        }
        OpKind::Softmax { axis } | OpKind::LogSoftmax { axis } => {
            check_axis(op, x[0].shape(), *axis)?;
            let (outer, len, inner) = axis_split(x[0].shape(), *axis);
            let src = x[0].data();
            let mut out = vec![F::zero(); src.len()];
            let log = matches!(kind, OpKind::LogSoftmax { .. });
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mx = (0..len).map(|j| src[at(j)]).fold(F::neg_infinity(), F::max);
                    let z: F = (0..len).map(|j| (src[at(j)] - mx).exp()).sum();
                    let lz = z.ln();
                    for j in 0..len {
                        out[at(j)] = if log { src[at(j)] - mx - lz } else { (src[at(j)] - mx).exp() / z };
                    }
                }
            }
            plain(x[0].shape().to_vec(), out)
        }
        OpKind::MaskedSoftmax => {
            let shape = x[0].shape();
            let n = *shape.last().ok_or_else(|| mismatch(op, "scalar logits".into()))?;
            if x[1].numel() != n {
                return Err(mismatch(op, format!("mask of {} for last axis {}", x[1].numel(), n)));
            }
            let m = x[1].data();
            if m.iter().any(|&w| w < F::zero()) {
                return Err(AutodiffError::InvalidArgument("masked_softmax weights must be non-negative".into()));
            }
            if m.iter().all(|&w| w == F::zero()) {
                return Err(AutodiffError::InvalidArgument("masked_softmax with every column masked".into()));
            }
            let src = x[0].data();
            let mut out = vec![F::zero(); src.len()];
            let mut ez = vec![F::zero(); src.len()];
            let cap = F::of(60.0);
            for (r, row) in src.chunks(n).enumerate() {
                let mx = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &w)| w > F::zero())
                    .fold(F::neg_infinity(), |a, (&v, _)| a.max(v));
                let e: Vec<F> = row.iter().map(|&v| (v - mx).min(cap).exp()).collect();
                let z: F = e.iter().zip(m).map(|(&e, &w)| e * w).sum();
                for j in 0..n {
                    ez[r * n + j] = e[j] / z;
                    out[r * n + j] = m[j] * e[j] / z;
                }
            }
            Ok((Tensor::new(shape.to_vec(), out)?, Saved::MaskedSoftmax { ez }))
        }
        OpKind::Sigmoid => plain(x[0].shape().to_vec(), x[0].data().iter().map(|&v| stable_sigmoid(v)).collect()),
        OpKind::Gelu => plain(x[0].shape().to_vec(), x[0].data().iter().map(|&v| gelu_parts(v).0).collect()),
        OpKind::Relu => plain(x[0].shape().to_vec(), x[0].data().iter().map(|&v| v.max(F::zero())).collect()),
        OpKind::Square => plain(x[0].shape().to_vec(), x[0].data().iter().map(|&v| v * v).collect()),
        OpKind::Log => plain(x[0].shape().to_vec(), x[0].data().iter().map(|&v| v.ln()).collect()),
        OpKind::LayerNorm { eps } => {
            let shape = x[0].shape();
            let d = *shape.last().ok_or_else(|| mismatch(op, "scalar input".into()))?;
            if x[1].numel() != d || x[2].numel() != d {
                return Err(mismatch(op, format!("gamma/beta must have {} entries", d)));
            }
            let (g, b) = (x[1].data(), x[2].data());
            let eps = F::of(*eps);
            let df = F::of(d as f64);
            let src = x[0].data();
            let rows = src.len() / d.max(1);
            let mut out = vec![F::zero(); src.len()];
            let mut xhat = vec![F::zero(); src.len()];
            let mut rstd = vec![F::zero(); rows];
            for (r, row) in src.chunks(d).enumerate() {
                let mu = row.iter().copied().sum::<F>() / df;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mu) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
            Ok((Tensor::new(shape.to_vec(), out)?, Saved::LayerNorm { xhat, rstd }))
        }
        OpKind::Transpose => {
            require_rank(op, x[0], 2)?;
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            let src = x[0].data();
            let mut out = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
            plain(vec![c, r], out)
        }
        OpKind::Reshape(shape) => {
            if numel(shape) != x[0].numel() {
                return Err(mismatch(op, format!("{:?} -> {:?}", x[0].shape(), shape)));
            }
            plain(shape.clone(), x[0].data().to_vec())
        }
        OpKind::SliceRows { start, end } => {
            let rows: Vec<usize> = (*start..*end).collect();
            if start > end {
                return Err(mismatch(op, format!("empty range {}..{}", start, end)));
            }
            gather(op, x[0], &rows)
        }
        OpKind::GatherRows(rows) => gather(op, x[0], rows),
        OpKind::SliceCols { start, end } => {
            require_rank(op, x[0], 2)?;
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            if start > end || *end > c {
                return Err(mismatch(op, format!("columns {}..{} of {}", start, end, c)));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for row in x[0].data().chunks(c) {
                out.extend_from_slice(&row[*start..*end]);
            }
            plain(vec![r, w], out)
        }
        OpKind::Concat { axis } => {
            let base = x[0].shape();
            check_axis(op, base, *axis)?;
            for t in &x[1..] {
                let s = t.shape();
                if s.len() != base.len() || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != *axis && a != b) {
                    return Err(mismatch(op, format!("{:?} vs {:?} along axis {}", base, s, axis)));
                }
            }
            let (outer, _, inner) = axis_split(base, *axis);
            let total_len: usize = x.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total_len * inner);
            for o in 0..outer {
                for t in x {
                    let w = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = base.to_vec();
            shape[*axis] = total_len;
            plain(shape, out)
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let mean = matches!(kind, OpKind::Mean { .. });
            match axis {
                None => {
                    let s: F = x[0].data().iter().copied().sum();
                    let v = if mean { s / F::of(x[0].numel().max(1) as f64) } else { s };
                    plain(Vec::new(), vec![v])
                }
                Some(ax) => {
                    check_axis(op, x[0].shape(), *ax)?;
                    let (outer, len, inner) = axis_split(x[0].shape(), *ax);
                    let src = x[0].data();
                    let mut out = vec![F::zero(); outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                out[o * inner + i] += src[o * len * inner + j * inner + i];
                            }
                        }
                    }
                    if mean {
                        let lf = F::of(len.max(1) as f64);
                        out.iter_mut().for_each(|v| *v /= lf);
                    }
                    let mut shape = x[0].shape().to_vec();
                    shape.remove(*ax);
                    plain(shape, out)
                }
            }
        }
        OpKind::L2Norm => {
            let shape = x[0].shape();
            let d = *shape.last().ok_or_else(|| mismatch(op, "scalar input".into()))?;
            let out: Vec<F> = x[0].data().chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt()).collect();
            plain(shape[..shape.len() - 1].to_vec(), out)
        }
        OpKind::StraightThrough => {
            if x[0].shape() != x[1].shape() {
                return Err(mismatch(op, format!("{:?} vs {:?}", x[0].shape(), x[1].shape())));
            }
            plain(x[1].shape().to_vec(), x[1].data().to_vec())
        }
    }
}

fn gather<F: Real>(op: &'static str, t: &Tensor<F>, rows: &[usize]) -> Result<(Tensor<F>, Saved<F>)> {
    if t.rank() == 0 {
        return Err(mismatch(op, "cannot index rows of a scalar".into()));
    }
    let n = t.shape()[0];
    let w = t.numel() / n.max(1);
    let mut out = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        if r >= n {
            return Err(mismatch(op, format!("row {} of {}", r, n)));
        }
        out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Ok((Tensor::new(shape, out)?, Saved::None))
}

fn reduce_broadcast<F: Real>(bc: &Broadcast, g: impl Iterator<Item = F>, b_len: usize) -> Vec<F> {
    let mut out = vec![F::zero(); b_len];
    for (i, v) in g.enumerate() {
        out[bc.index(i)] += v;
    }
    out
}

/// Vector-Jacobian products for one node. Entries are `None` for inputs that
/// do not need a gradient.
fn backward_op<F: Real>(
    kind: &OpKind,
    x: &[&Tensor<F>],
    y: &Tensor<F>,
    saved: &Saved<F>,
    g: &[F],
    needs: &[bool],
) -> Vec<Option<Vec<F>>> {
    let op = kind.name();
    match kind {
        OpKind::MatMul => {
            let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
            let n = x[1].shape()[1];
            let ga = needs[0].then(|| {
                let mut out = vec![F::zero(); m * k];
                gemm(g, MatView::new(m, n), x[1].data(), MatView::new(k, n).t(), &mut out, false);
                out
            });
            let gb = needs[1].then(|| {
                let mut out = vec![F::zero(); k * n];
                gemm(x[0].data(), MatView::new(m, k).t(), g, MatView::new(m, n), &mut out, false);
                out
            });
            vec![ga, gb]
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let bc = Broadcast::plan(op, x[0].shape(), x[1].shape()).expect("validated in forward");
            let (a, b) = (x[0].data(), x[1].data());
            let ga = needs[0].then(|| match kind {
                OpKind::Mul => g.iter().enumerate().map(|(i, &gv)| gv * b[bc.index(i)]).collect(),
                OpKind::Div => g.iter().enumerate().map(|(i, &gv)| gv / b[bc.index(i)]).collect(),
                _ => g.to_vec(),
            });
            let gb = needs[1].then(|| match kind {
                OpKind::Add => reduce_broadcast(&bc, g.iter().copied(), b.len()),
                OpKind::Sub => reduce_broadcast(&bc, g.iter().map(|&v| -v), b.len()),
                OpKind::Div => reduce_broadcast(
                    &bc,
                    g.iter().zip(a).enumerate().map(|(i, (&gv, &av))| {
                        let bv = b[bc.index(i)];
                        -gv * av / (bv * bv)
                    }),
                    b.len(),
                ),
                _ => reduce_broadcast(&bc, g.iter().zip(a).map(|(&gv, &av)| gv * av), b.len()),
            });
            vec![ga, gb]
        }
        OpKind::Scale(c) => {
            let c = F::of(*c);
            vec![Some(g.iter().map(|&v| v * c).collect())]
        }
        OpKind::Softmax { axis } | OpKind::LogSoftmax { axis } => {
            let (outer, len, inner) = axis_split(x[0].shape(), *axis);
            let yv = y.data();
            let mut out = vec![F::zero(); g.len()];
            let log = matches!(kind, OpKind::LogSoftmax { .. });
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    if log {
                        let gs: F = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            out[at(j)] = g[at(j)] - yv[at(j)].exp() * gs;
                        }
                    } else {
                        let dot: F = (0..len).map(|j| g[at(j)] * yv[at(j)]).sum();
                        for j in 0..len {
                            out[at(j)] = yv[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            vec![Some(out)]
        }
        OpKind::MaskedSoftmax => {
            let Saved::MaskedSoftmax { ez } = saved else { unreachable!("masked softmax saves ez") };
            let n = x[1].numel();
            let yv = y.data();
            let mut gx = vec![F::zero(); g.len()];
            let mut gm = vec![F::zero(); n];
            for r in 0..g.len() / n {
                let row = r * n..(r + 1) * n;
                let dot: F = g[row.clone()].iter().zip(&yv[row.clone()]).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    let i = r * n + j;
                    gx[i] = yv[i] * (g[i] - dot);
                    gm[j] += ez[i] * (g[i] - dot);
                }
            }
            vec![needs[0].then_some(gx), needs[1].then_some(gm)]
        }
        OpKind::Sigmoid => vec![Some(g.iter().zip(y.data()).map(|(&gv, &s)| gv * s * (F::one() - s)).collect())],
        OpKind::Gelu => vec![Some(g.iter().zip(x[0].data()).map(|(&gv, &v)| gv * gelu_parts(v).1).collect())],
        OpKind::Relu => vec![Some(
            g.iter().zip(x[0].data()).map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() }).collect(),
        )],
        OpKind::Square => vec![Some(g.iter().zip(x[0].data()).map(|(&gv, &v)| F::of(2.0) * v * gv).collect())],
        OpKind::Log => vec![Some(g.iter().zip(x[0].data()).map(|(&gv, &v)| gv / v).collect())],
        OpKind::LayerNorm { .. } => {
            let Saved::LayerNorm { xhat, rstd } = saved else { unreachable!("layernorm saves stats") };
            let d = x[1].numel();
            let gamma = x[1].data();
            let df = F::of(d as f64);
            let mut gx = vec![F::zero(); g.len()];
            let mut gg = vec![F::zero(); d];
            let mut gb = vec![F::zero(); d];
            for r in 0..g.len() / d {
                let base = r * d;
                let mut sum_gh = F::zero();
                let mut sum_ghx = F::zero();
                for j in 0..d {
                    let gh = g[base + j] * gamma[j];
                    sum_gh += gh;
                    sum_ghx += gh * xhat[base + j];
                    gg[j] += g[base + j] * xhat[base + j];
                    gb[j] += g[base + j];
                }
                for j in 0..d {
                    let gh = g[base + j] * gamma[j];
                    gx[base + j] = rstd[r] / df * (df * gh - sum_gh - xhat[base + j] * sum_ghx);
                }
            }
            vec![needs[0].then_some(gx), needs[1].then_some(gg), needs[2].then_some(gb)]
        }
        OpKind::Transpose => {
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            let mut out = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(out)]
        }
        OpKind::Reshape(_) | OpKind::StraightThrough => {
            let mut v = vec![Some(g.to_vec())];
            if matches!(kind, OpKind::StraightThrough) {
                v.push(None);
            }
            v
        }
        OpKind::SliceRows { start, end } => {
            let rows: Vec<usize> = (*start..*end).collect();
            vec![Some(scatter_rows(x[0], &rows, g))]
        }
        OpKind::GatherRows(rows) => vec![Some(scatter_rows(x[0], rows, g))],
        OpKind::SliceCols { start, end } => {
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            let w = end - start;
            let mut out = vec![F::zero(); r * c];
            for i in 0..r {
                out[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![Some(out)]
        }
        OpKind::Concat { axis } => {
            let (outer, _, inner) = axis_split(x[0].shape(), *axis);
            let mut outs: Vec<Vec<F>> = x.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (t, out) in x.iter().zip(outs.iter_mut()) {
                    let w = t.shape()[*axis] * inner;
                    out.extend_from_slice(&g[pos..pos + w]);
                    pos += w;
                }
            }
            outs.into_iter().map(Some).collect()
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let mean = matches!(kind, OpKind::Mean { .. });
            match axis {
                None => {
                    let scale = if mean { F::one() / F::of(x[0].numel().max(1) as f64) } else { F::one() };
                    vec![Some(vec![g[0] * scale; x[0].numel()])]
                }
                Some(ax) => {
                    let (outer, len, inner) = axis_split(x[0].shape(), *ax);
                    let scale = if mean { F::one() / F::of(len.max(1) as f64) } else { F::one() };
                    let mut out = vec![F::zero(); x[0].numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                out[o * len * inner + j * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    vec![Some(out)]
                }
            }
        }
        OpKind::L2Norm => {
            let d = *x[0].shape().last().expect("validated in forward");
            let mut out = vec![F::zero(); x[0].numel()];
            for (r, (row, &nrm)) in x[0].data().chunks(d).zip(y.data()).enumerate() {
                if nrm > F::zero() {
                    for j in 0..d {
                        out[r * d + j] = g[r] * row[j] / nrm;
                    }
                }
            }
            vec![Some(out)]
        }
    }
}

fn scatter_rows<F: Real>(t: &Tensor<F>, rows: &[usize], g: &[F]) -> Vec<F> {
    let n = t.shape()[0];
    let w = t.numel() / n.max(1);
    let mut out = vec![F::zero(); t.numel()];
    for (k, &r) in rows.iter().enumerate() {
        for j in 0..w {
            out[r * w + j] += g[k * w + j];
        }
    }
    out
}
