//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive records its inputs and output on the tape. `backward`
//! walks the tape once in reverse and is allowed only once per tape.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Rows with a norm at or below this are mapped to zero by `l2_normalize_rows`.
pub const NORM_FLOOR: f64 = 1e-9;

/// The closed catalog of differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Transpose,
    Concat,
    Slice,
    Softmax,
    LayerNorm,
    Gelu,
    Embedding,
    Mean,
    L2NormalizeRows,
    Log,
    Exp,
    Neg,
    Sum,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 18] = [
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::ScalarMul,
        Self::MatMul,
        Self::Transpose,
        Self::Concat,
        Self::Slice,
        Self::Softmax,
        Self::LayerNorm,
        Self::Gelu,
        Self::Embedding,
        Self::Mean,
        Self::L2NormalizeRows,
        Self::Log,
        Self::Exp,
        Self::Neg,
        Self::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::ScalarMul => "scalar_mul",
            Self::MatMul => "matmul",
            Self::Transpose => "transpose",
            Self::Concat => "concat",
            Self::Slice => "slice",
            Self::Softmax => "softmax",
            Self::LayerNorm => "layer_norm",
            Self::Gelu => "gelu",
            Self::Embedding => "embedding",
            Self::Mean => "mean",
            Self::L2NormalizeRows => "l2_normalize_rows",
            Self::Log => "log",
            Self::Exp => "exp",
            Self::Neg => "neg",
            Self::Sum => "sum",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// A primitive together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Elementwise; the right operand may be a `[1, n]` row or a single value.
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Softmax { axis: usize },
    /// Normalizes over the last axis; inputs are `(x, gain, bias)`.
    LayerNorm { eps: f64 },
    /// Tanh approximation.
    Gelu,
    /// Input is the `(vocab, width)` table.
    Embedding { ids: Vec<u32> },
    /// Keeps the reduced axis with extent 1.
    Mean { axis: usize },
    L2NormalizeRows,
    Log,
    Exp,
    Neg,
    /// Reduces everything to shape `[1]`.
    Sum,
}

impl Op {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Op::Add => PrimitiveKind::Add,
            Op::Sub => PrimitiveKind::Sub,
            Op::Mul => PrimitiveKind::Mul,
            Op::ScalarMul(_) => PrimitiveKind::ScalarMul,
            Op::MatMul => PrimitiveKind::MatMul,
            Op::Transpose => PrimitiveKind::Transpose,
            Op::Concat { .. } => PrimitiveKind::Concat,
            Op::Slice { .. } => PrimitiveKind::Slice,
            Op::Softmax { .. } => PrimitiveKind::Softmax,
            Op::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Op::Gelu => PrimitiveKind::Gelu,
            Op::Embedding { .. } => PrimitiveKind::Embedding,
            Op::Mean { .. } => PrimitiveKind::Mean,
            Op::L2NormalizeRows => PrimitiveKind::L2NormalizeRows,
            Op::Log => PrimitiveKind::Log,
            Op::Exp => PrimitiveKind::Exp,
            Op::Neg => PrimitiveKind::Neg,
            Op::Sum => PrimitiveKind::Sum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<Var>,
    needs_grad: bool,
    aux: Vec<f64>,
}

/// Records primitives for one forward pass and differentiates them once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a leaf on the tape; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_grad(None);
        let needs_grad = tensor.requires_grad();
        self.push(tensor, None, Vec::new(), needs_grad, Vec::new())
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after `backward`; `None` for leaves without
    /// `requires_grad` and for interior nodes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Option<Op>,
        inputs: Vec<Var>,
        needs_grad: bool,
        aux: Vec<f64>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies one primitive and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let arity_ok = match &op {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => inputs.len() == 2,
            Op::LayerNorm { .. } => inputs.len() == 3,
            Op::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::InvalidArgument(format!(
                "{} got {} inputs",
                op.kind(),
                inputs.len()
            )));
        }
        let (value, aux) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &vals)?
        };
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, Some(op), inputs.to_vec(), needs_grad, aux))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::ScalarMul(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    /// Rows `start..end` of a rank-2 value.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.slice(a, 0, start, end)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        self.apply(Op::Embedding { ids: ids.to_vec() }, &[table])
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::L2NormalizeRows, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    /// `x · w + b` with `b` broadcast as a row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Differentiates a scalar `loss` into every leaf that requires grad.
    ///
    /// A tape can be differentiated once; a second call returns
    /// [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let vals: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let input_grads = backward_op(op, &vals, &node.value, &node.aux, &g, &wanted);
            for ((input, want), ig) in node.inputs.iter().zip(wanted).zip(input_grads) {
                if !want {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.op.is_none() && node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![0.0; n])));
            }
        }
        Ok(())
    }
}

fn mismatch(op: &'static str, ts: &[&Tensor]) -> Error {
    Error::ShapeMismatch {
        op,
        shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn broadcast_rule(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.numel() == 1 {
        Ok(Broadcast::Scalar)
    } else if a.rank() == 2 && b.shape() == [1, a.shape()[1]] {
        Ok(Broadcast::Row)
    } else {
        Err(mismatch(op, &[a, b]))
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn binary<F: Fn(f64, f64) -> f64>(a: &Tensor, b: &Tensor, rule: Broadcast, f: F) -> Vec<f64> {
    let ad = a.data();
    let bd = b.data();
    match rule {
        Broadcast::Same => ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
        Broadcast::Scalar => ad.iter().map(|x| f(*x, bd[0])).collect(),
        Broadcast::Row => {
            let n = bd.len();
            ad.iter().enumerate().map(|(i, x)| f(*x, bd[i % n])).collect()
        }
    }
}

/// Folds a full-size gradient back onto a broadcast operand.
fn reduce_broadcast(g: &[f64], rule: Broadcast, b_len: usize) -> Vec<f64> {
    match rule {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; b_len];
            for (i, v) in g.iter().enumerate() {
                out[i % b_len] += v;
            }
            out
        }
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn forward(op: &Op, x: &[&Tensor]) -> Result<(Tensor, Vec<f64>)> {
    let plain = |t: Tensor| Ok((t, Vec::new()));
    match op {
        Op::Add | Op::Sub | Op::Mul => {
            let rule = broadcast_rule(op.kind().name(), x[0], x[1])?;
            let data = match op {
                Op::Add => binary(x[0], x[1], rule, |p, q| p + q),
                Op::Sub => binary(x[0], x[1], rule, |p, q| p - q),
                _ => binary(x[0], x[1], rule, |p, q| p * q),
            };
            plain(Tensor::new(x[0].shape().to_vec(), data)?)
        }
        Op::ScalarMul(c) => plain(Tensor::new(
            x[0].shape().to_vec(),
            x[0].data().iter().map(|v| v * c).collect(),
        )?),
        Op::MatMul => {
            let (m, k) = x[0].dims2().map_err(|_| mismatch("matmul", x))?;
            let (k2, n) = x[1].dims2().map_err(|_| mismatch("matmul", x))?;
            if k != k2 {
                return Err(mismatch("matmul", x));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(x[0].data(), x[1].data(), m, k, n, &mut out);
            plain(Tensor::new(vec![m, n], out)?)
        }
        Op::Transpose => {
            let (r, c) = x[0].dims2().map_err(|_| mismatch("transpose", x))?;
            let d = x[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            plain(Tensor::new(vec![c, r], out)?)
        }
        Op::Concat { axis } => {
            let axis = *axis;
            check_axis("concat", x[0], axis)?;
            let rank = x[0].rank();
            for t in x {
                let ok = t.rank() == rank
                    && t.shape()
                        .iter()
                        .zip(x[0].shape())
                        .enumerate()
                        .all(|(i, (p, q))| i == axis || p == q);
                if !ok {
                    return Err(mismatch("concat", x));
                }
            }
            let mut shape = x[0].shape().to_vec();
            shape[axis] = x.iter().map(|t| t.shape()[axis]).sum();
            let (outer, _, inner) = around_axis(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in x {
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            plain(Tensor::new(shape, out)?)
        }
        Op::Slice { axis, start, end } => {
            let (axis, start, end) = (*axis, *start, *end);
            check_axis("slice", x[0], axis)?;
            if start >= end || end > x[0].shape()[axis] {
                return Err(Error::InvalidArgument(format!(
                    "slice {start}..{end} out of range for axis {axis} of {:?}",
                    x[0].shape()
                )));
            }
            let (outer, n, inner) = around_axis(x[0].shape(), axis);
            let mut shape = x[0].shape().to_vec();
            shape[axis] = end - start;
            let d = x[0].data();
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * n * inner;
                out.extend_from_slice(&d[base + start * inner..base + end * inner]);
            }
            plain(Tensor::new(shape, out)?)
        }
        Op::Softmax { axis } => {
            check_axis("softmax", x[0], *axis)?;
            let (outer, n, inner) = around_axis(x[0].shape(), *axis);
            let d = x[0].data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |i: usize| o * n * inner + i * inner + k;
                    let max = (0..n).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for i in 0..n {
                        let e = (d[idx(i)] - max).exp();
                        out[idx(i)] = e;
                        total += e;
                    }
                    for i in 0..n {
                        out[idx(i)] /= total;
                    }
                }
            }
            plain(Tensor::new(x[0].shape().to_vec(), out)?)
        }
        Op::LayerNorm { eps } => {
            let n = *x[0].shape().last().expect("rank >= 1");
            if x[1].numel() != n || x[2].numel() != n {
                return Err(mismatch("layer_norm", x));
            }
            let d = x[0].data();
            let (gain, bias) = (x[1].data(), x[2].data());
            let rows = d.len() / n;
            let mut out = vec![0.0; d.len()];
            // aux: normalized values followed by one inverse std per row
            let mut aux = vec![0.0; d.len() + rows];
            for r in 0..rows {
                let row = &d[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    let xhat = (row[j] - mean) * inv;
                    aux[r * n + j] = xhat;
                    out[r * n + j] = xhat * gain[j] + bias[j];
                }
                aux[d.len() + r] = inv;
            }
            Ok((Tensor::new(x[0].shape().to_vec(), out)?, aux))
        }
        Op::Gelu => plain(Tensor::new(
            x[0].shape().to_vec(),
            x[0].data()
                .iter()
                .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
                .collect(),
        )?),
        Op::Embedding { ids } => {
            let (vocab, width) = x[0].dims2().map_err(|_| mismatch("embedding", x))?;
            if ids.is_empty() {
                return Err(Error::InvalidArgument("embedding lookup of zero ids".into()));
            }
            let mut out = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                if id as usize >= vocab {
                    return Err(Error::OutOfVocabulary { id, vocab });
                }
                out.extend_from_slice(x[0].row(id as usize));
            }
            plain(Tensor::new(vec![ids.len(), width], out)?)
        }
        Op::Mean { axis } => {
            check_axis("mean", x[0], *axis)?;
            let (outer, n, inner) = around_axis(x[0].shape(), *axis);
            let d = x[0].data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    for k in 0..inner {
                        out[o * inner + k] += d[o * n * inner + i * inner + k];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= n as f64);
            let mut shape = x[0].shape().to_vec();
            shape[*axis] = 1;
            plain(Tensor::new(shape, out)?)
        }
        Op::L2NormalizeRows => {
            let (r, c) = x[0].dims2().map_err(|_| mismatch("l2_normalize_rows", x))?;
            let d = x[0].data();
            let mut out = vec![0.0; r * c];
            let mut norms = vec![0.0; r];
            for i in 0..r {
                let row = &d[i * c..(i + 1) * c];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                norms[i] = norm;
                if norm > NORM_FLOOR {
                    for j in 0..c {
                        out[i * c + j] = row[j] / norm;
                    }
                }
            }
            Ok((Tensor::new(vec![r, c], out)?, norms))
        }
        Op::Log => plain(Tensor::new(
            x[0].shape().to_vec(),
            x[0].data().iter().map(|v| v.ln()).collect(),
        )?),
        Op::Exp => plain(Tensor::new(
            x[0].shape().to_vec(),
            x[0].data().iter().map(|v| v.exp()).collect(),
        )?),
        Op::Neg => plain(Tensor::new(
            x[0].shape().to_vec(),
            x[0].data().iter().map(|v| -v).collect(),
        )?),
        Op::Sum => plain(Tensor::scalar(x[0].data().iter().sum())),
    }
}

/// Vector-Jacobian products for one node. Entries for inputs that do not
/// want a gradient may be `None`.
fn backward_op(
    op: &Op,
    x: &[&Tensor],
    y: &Tensor,
    aux: &[f64],
    g: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Add | Op::Sub | Op::Mul => {
            let rule = broadcast_rule("binary", x[0], x[1]).expect("checked in forward");
            let ga = match op {
                Op::Mul if wanted[0] => Some(binary_grad_lhs(g, x[1], rule)),
                Op::Mul => None,
                _ => Some(g.to_vec()),
            };
            let gb = if wanted[1] {
                let full: Vec<f64> = match op {
                    Op::Add => g.to_vec(),
                    Op::Sub => g.iter().map(|v| -v).collect(),
                    _ => g.iter().zip(x[0].data()).map(|(p, q)| p * q).collect(),
                };
                Some(reduce_broadcast(&full, rule, x[1].numel()))
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::ScalarMul(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::MatMul => {
            let (m, k) = x[0].dims2().expect("rank 2");
            let n = x[1].shape()[1];
            let (a, b) = (x[0].data(), x[1].data());
            let ga = wanted[0].then(|| {
                let mut out = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        out[i * k + p] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                    }
                }
                out
            });
            let gb = wanted[1].then(|| {
                let mut out = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let orow = &mut out[p * n..(p + 1) * n];
                        for (o, gv) in orow.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                out
            });
            vec![ga, gb]
        }
        Op::Transpose => {
            let (r, c) = x[0].dims2().expect("rank 2");
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(out)]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = around_axis(y.shape(), *axis);
            let mut offset = 0;
            x.iter()
                .zip(wanted)
                .map(|(t, &want)| {
                    let n = t.shape()[*axis];
                    let res = want.then(|| {
                        let mut out = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            out.extend_from_slice(&g[base..base + n * inner]);
                        }
                        out
                    });
                    offset += n;
                    res
                })
                .collect()
        }
        Op::Slice { axis, start, end } => {
            let (outer, n, inner) = around_axis(x[0].shape(), *axis);
            let width = (end - start) * inner;
            let mut out = vec![0.0; x[0].numel()];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                out[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(out)]
        }
        Op::Softmax { axis } => {
            let (outer, n, inner) = around_axis(y.shape(), *axis);
            let yd = y.data();
            let mut out = vec![0.0; yd.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |i: usize| o * n * inner + i * inner + k;
                    let dot: f64 = (0..n).map(|i| g[idx(i)] * yd[idx(i)]).sum();
                    for i in 0..n {
                        out[idx(i)] = yd[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            vec![Some(out)]
        }
        Op::LayerNorm { .. } => {
            let n = x[1].numel();
            let total = x[0].numel();
            let rows = total / n;
            let gain = x[1].data();
            let (xhat, invs) = aux.split_at(total);
            let mut gx = wanted[0].then(|| vec![0.0; total]);
            let mut gg = wanted[1].then(|| vec![0.0; n]);
            let mut gbias = wanted[2].then(|| vec![0.0; n]);
            let mut dxhat = vec![0.0; n];
            for r in 0..rows {
                let gr = &g[r * n..(r + 1) * n];
                let xr = &xhat[r * n..(r + 1) * n];
                if let Some(gg) = gg.as_mut() {
                    gg.iter_mut().zip(gr.iter().zip(xr)).for_each(|(o, (p, q))| *o += p * q);
                }
                if let Some(gb) = gbias.as_mut() {
                    gb.iter_mut().zip(gr).for_each(|(o, p)| *o += p);
                }
                if let Some(gx) = gx.as_mut() {
                    for j in 0..n {
                        dxhat[j] = gr[j] * gain[j];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(p, q)| p * q).sum();
                    let inv = invs[r];
                    let nf = n as f64;
                    for j in 0..n {
                        gx[r * n + j] = inv / nf * (nf * dxhat[j] - s1 - xr[j] * s2);
                    }
                }
            }
            vec![gx, gg, gbias]
        }
        Op::Gelu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, gv)| {
                    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
                })
                .collect(),
        )],
        Op::Embedding { ids } => {
            let width = x[0].shape()[1];
            let mut out = vec![0.0; x[0].numel()];
            for (r, &id) in ids.iter().enumerate() {
                let dst = &mut out[id as usize * width..(id as usize + 1) * width];
                dst.iter_mut()
                    .zip(&g[r * width..(r + 1) * width])
                    .for_each(|(o, v)| *o += v);
            }
            vec![Some(out)]
        }
        Op::Mean { axis } => {
            let (outer, n, inner) = around_axis(x[0].shape(), *axis);
            let mut out = vec![0.0; x[0].numel()];
            for o in 0..outer {
                for i in 0..n {
                    for k in 0..inner {
                        out[o * n * inner + i * inner + k] = g[o * inner + k] / n as f64;
                    }
                }
            }
            vec![Some(out)]
        }
        Op::L2NormalizeRows => {
            let (r, c) = y.dims2().expect("rank 2");
            let yd = y.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let norm = aux[i];
                if norm <= NORM_FLOOR {
                    continue;
                }
                let yr = &yd[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..c {
                    out[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                }
            }
            vec![Some(out)]
        }
        Op::Log => vec![Some(g.iter().zip(x[0].data()).map(|(p, q)| p / q).collect())],
        Op::Exp => vec![Some(g.iter().zip(y.data()).map(|(p, q)| p * q).collect())],
        Op::Neg => vec![Some(g.iter().map(|v| -v).collect())],
        Op::Sum => vec![Some(vec![g[0]; x[0].numel()])],
    }
}

fn binary_grad_lhs(g: &[f64], b: &Tensor, rule: Broadcast) -> Vec<f64> {
    let bd = b.data();
    match rule {
        Broadcast::Same => g.iter().zip(bd).map(|(p, q)| p * q).collect(),
        Broadcast::Scalar => g.iter().map(|p| p * bd[0]).collect(),
        Broadcast::Row => {
            let n = bd.len();
            g.iter().enumerate().map(|(i, p)| p * bd[i % n]).collect()
        }
    }
}
