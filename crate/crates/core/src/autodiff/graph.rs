//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended to a [`Graph`] in evaluation order, so a node's parents
//! always have smaller indices and reverse index order is a valid topological
//! order for the backward sweep.
//!
//! Broadcasting: a binary op `f(a, b)` accepts `b` when
//! - `b.shape == a.shape`,
//! - `a.shape` ends with `b.shape` (b is repeated over the leading axes), or
//! - `b.shape == a.shape[..r-1] ++ [1]` (b is repeated along the last axis).
//!
//! Only the second operand broadcasts and ranks are never promoted.

use super::Array;
use crate::error::{ensure, Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Leading,
    Trailing,
}

impl Bcast {
    fn detect(a: &[usize], b: &[usize]) -> Option<Bcast> {
        if a == b {
            return Some(Bcast::Same);
        }
        if b.len() < a.len() && a.ends_with(b) {
            return Some(Bcast::Leading);
        }
        let r = a.len();
        if b.len() == r && b[r - 1] == 1 && a[..r - 1] == b[..r - 1] {
            return Some(Bcast::Trailing);
        }
        None
    }

    #[inline]
    fn index(self, i: usize, a_last: usize, b_len: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Leading => i % b_len,
            Bcast::Trailing => i / a_last,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    RowNorm(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    SegmentMax(Var, Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b, _) | Sub(a, b, _) | Mul(a, b, _) | ScaleBy(a, b) | MatMul(a, b) | MatMulNt(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Offset(a) | Relu(a) | Gelu(a) | Tanh(a) | Exp(a) | Log(a) | Square(a)
            | RowNorm(a) | Sum(a) | SumAxis(a, _) | Transpose(a) | Softmax(a, _) | LogSoftmax(a, _)
            | GatherRows(a, _) | SliceCols(a, _) | Reshape(a) | SegmentMax(a, _) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// A single-threaded differentiation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// New empty graph. Finite checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Enable or disable the NaN/Inf check run on every op result.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Bcast, Array)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let kind = Bcast::detect(sa, sb)
            .ok_or_else(|| Error::contract(format!("{name}: cannot broadcast {sb:?} onto {sa:?}")))?;
        Ok((kind, self.value(a).clone()))
    }

    fn zip_apply(&self, b: Var, kind: Bcast, mut out: Array, f: impl Fn(f64, f64) -> f64) -> Array {
        let bv = self.value(b).data();
        let last = *out.shape().last().unwrap();
        let blen = bv.len();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = f(*x, bv[kind.index(i, last, blen)]);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (kind, base) = self.binary(a, b, "add")?;
        let out = self.zip_apply(b, kind, base, |x, y| x + y);
        self.push(out, Op::Add(a, b, kind), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (kind, base) = self.binary(a, b, "sub")?;
        let out = self.zip_apply(b, kind, base, |x, y| x - y);
        self.push(out, Op::Sub(a, b, kind), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (kind, base) = self.binary(a, b, "mul")?;
        let out = self.zip_apply(b, kind, base, |x, y| x * y);
        self.push(out, Op::Mul(a, b, kind), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), "offset")
    }

    /// `a * s` where `s` is a single-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        ensure!(self.value(s).len() == 1, "scale_by expects a single-element scale, got {:?}", self.shape(s));
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::ScaleBy(a, s), "scale_by")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), "relu")
    }

    /// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    /// Euclidean norm of every row of a rank-2 node, shape `[n, 1]`.
    /// The subgradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        ensure!(self.value(a).rank() == 2, "row_norm expects rank 2, got {:?}", self.shape(a));
        let v = self.value(a);
        let out: Vec<f64> = (0..v.rows()).map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let n = out.len();
        self.push(Array::from_parts(vec![n, 1], out), Op::RowNorm(a), "row_norm")
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), "sum_axis: axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        self.push(Array::from_parts(oshape, out), Op::SumAxis(a, axis), "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        ensure!(axis < self.shape(a).len(), "mean_axis: axis {axis} out of range");
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.rank() == 2 && bv.rank() == 2, "matmul expects rank-2 operands");
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        ensure!(bv.rows() == k, "matmul: {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.rank() == 2 && bv.rank() == 2, "matmul_nt expects rank-2 operands");
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        ensure!(bv.cols() == k, "matmul_nt: {:?} x {:?}^T", av.shape(), bv.shape());
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        self.push(Array::from_parts(vec![m, n], out), Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        ensure!(self.value(a).rank() == 2, "transpose expects rank 2");
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    // ---- normalizers ----

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
        let out = softmax_along(self.value(a), axis, false);
        self.push(out, Op::Softmax(a, axis), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), "log_softmax: axis {axis} out of range for {shape:?}");
        let out = softmax_along(self.value(a), axis, true);
        self.push(out, Op::LogSoftmax(a, axis), "log_softmax")
    }

    /// Row-wise layer normalization over the last axis followed by `gain * xhat + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        ensure!(eps > 0.0, "layernorm eps must be positive");
        let c = *self.shape(x).last().unwrap();
        ensure!(self.shape(gain) == [c] && self.shape(bias) == [c], "layernorm: gain/bias must be [{c}]");
        let xv = self.value(x);
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mu) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, &h)| h * g[i % c] + b[i % c]).collect();
        let shape = xv.shape().to_vec();
        self.push(Array::from_parts(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, "layernorm")
    }

    // ---- structural ----

    /// Rows of a rank-2 node selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        ensure!(av.rank() == 2, "gather_rows expects rank 2");
        ensure!(!idx.is_empty(), "gather_rows with no indices");
        let (r, c) = (av.rows(), av.cols());
        ensure!(idx.iter().all(|&i| i < r), "gather_rows index out of range (rows = {r})");
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(av.row(i));
        }
        self.push(Array::from_parts(vec![idx.len(), c], out), Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        ensure!(
            parts.iter().all(|&p| self.value(p).rank() == 2 && self.value(p).rows() == rows),
            "concat_cols: row counts differ"
        );
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Array::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        ensure!(
            parts.iter().all(|&p| self.value(p).rank() == 2 && self.value(p).cols() == cols),
            "concat_rows: column counts differ"
        );
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        self.push(Array::from_parts(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        ensure!(av.rank() == 2, "slice_cols expects rank 2");
        ensure!(len > 0 && start + len <= av.cols(), "slice_cols {start}+{len} out of {}", av.cols());
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(Array::from_parts(vec![rows, len], out), Op::SliceCols(a, start), "slice_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Column-wise max over consecutive blocks of `seg` rows: `[g*seg, c] -> [g, c]`.
    /// Ties resolve to the lowest row.
    pub fn segment_max(&mut self, a: Var, seg: usize) -> Result<Var> {
        let av = self.value(a);
        ensure!(av.rank() == 2, "segment_max expects rank 2");
        ensure!(seg > 0 && av.rows() % seg == 0, "segment_max: {} rows not divisible by {seg}", av.rows());
        let (rows, c) = (av.rows(), av.cols());
        let groups = rows / seg;
        let d = av.data();
        let mut out = vec![0.0; groups * c];
        let mut arg = vec![0usize; groups * c];
        for g in 0..groups {
            for j in 0..c {
                let mut best = g * seg * c + j;
                for r in 1..seg {
                    let idx = (g * seg + r) * c + j;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out[g * c + j] = d[best];
                arg[g * c + j] = best;
            }
        }
        self.push(Array::from_parts(vec![groups, c], out), Op::SegmentMax(a, arg), "segment_max")
    }

    // ---- backward ----

    /// Accumulates `d root / d node` into every node that requires gradient.
    ///
    /// Repeated calls add to the stored gradients; use [`Graph::zero_grads`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        ensure!(self.value(root).len() == 1, "backward root must be scalar, got {:?}", self.shape(root));
        let n = root.0 + 1;
        let mut local: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        local[root.0] = Some(Array::full(self.shape(root), 1.0));
        for i in (0..n).rev() {
            let Some(g) = local[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut local);
            }
            local[i] = Some(g);
        }
        if self.grads.is_empty() {
            self.grads = local;
        } else {
            if self.grads.len() < n {
                self.grads.resize_with(n, || None);
            }
            for (i, g) in local.into_iter().enumerate() {
                let Some(g) = g else { continue };
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array, local: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.acc(local, *a, |ga| ga.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
                let last = *node.value.shape().last().unwrap();
                let blen = self.value(*b).len();
                self.acc(local, *b, |gb| {
                    for (k, &gv) in gd.iter().enumerate() {
                        gb[kind.index(k, last, blen)] += sign * gv;
                    }
                });
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let last = *node.value.shape().last().unwrap();
                let blen = bv.len();
                self.acc(local, *a, |ga| {
                    for (k, &gv) in gd.iter().enumerate() {
                        ga[k] += gv * bv[kind.index(k, last, blen)];
                    }
                });
                self.acc(local, *b, |gb| {
                    for (k, &gv) in gd.iter().enumerate() {
                        gb[kind.index(k, last, blen)] += gv * av[k];
                    }
                });
            }
            Op::Scale(a, c) => self.acc(local, *a, |ga| ga.iter_mut().zip(gd).for_each(|(x, g)| *x += c * g)),
            Op::Offset(a) | Op::Reshape(a) => {
                self.acc(local, *a, |ga| ga.iter_mut().zip(gd).for_each(|(x, g)| *x += g))
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                let av = self.value(*a).data();
                self.acc(local, *a, |ga| ga.iter_mut().zip(gd).for_each(|(x, g)| *x += c * g));
                self.acc(local, *s, |gs| gs[0] += av.iter().zip(gd).map(|(x, g)| x * g).sum::<f64>());
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(local, *a, |ga| {
                    for k in 0..ga.len() {
                        if av[k] > 0.0 {
                            ga[k] += gd[k];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.acc(local, *a, |ga| {
                    for k in 0..ga.len() {
                        let x = av[k];
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        ga[k] += gd[k] * d;
                    }
                });
            }
            Op::Tanh(a) => self.acc(local, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += gd[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Exp(a) => self.acc(local, *a, |ga| {
                for k in 0..ga.len() {
                    ga[k] += gd[k] * y[k];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.acc(local, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += gd[k] / av[k];
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.acc(local, *a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += 2.0 * av[k] * gd[k];
                    }
                });
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let ad = av.data();
                self.acc(local, *a, |ga| {
                    for r in 0..y.len() {
                        if y[r] > 0.0 {
                            let s = gd[r] / y[r];
                            for j in 0..c {
                                ga[r * c + j] += s * ad[r * c + j];
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(local, *a, |ga| ga.iter_mut().for_each(|x| *x += gd[0])),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                self.acc(local, *a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for k in 0..inner {
                                ga[base + k] += gd[o * inner + k];
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let (ad, bd) = (av.data(), bv.data());
                // dA = G B^T
                self.acc(local, *a, |ga| {
                    for i in 0..m {
                        let gr = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = A^T G
                self.acc(local, *b, |gb| {
                    for i in 0..m {
                        let gr = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(ad[i * k + p], gr, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let (ad, bd) = (av.data(), bv.data());
                // C = A B^T:  dA = G B,  dB = G^T A
                self.acc(local, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            axpy(gd[i * n + j], &bd[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                });
                self.acc(local, *b, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            axpy(gd[i * n + j], &ad[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.acc(local, *a, |ga| ga.iter_mut().zip(gt.data()).for_each(|(x, g)| *x += g));
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                self.acc(local, *a, |ga| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + k;
                            let s: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += y[at(l)] * (gd[at(l)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                self.acc(local, *a, |ga| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + k;
                            let s: f64 = (0..len).map(|l| gd[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += gd[at(l)] - y[at(l)].exp() * s;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let rows = inv_std.len();
                self.acc(local, *x, |gx| {
                    let mut dh = vec![0.0; c];
                    for r in 0..rows {
                        let off = r * c;
                        for j in 0..c {
                            dh[j] = gd[off + j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(&xhat[off..off + c]).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[off + j] += inv_std[r] * (dh[j] - m1 - xhat[off + j] * m2);
                        }
                    }
                });
                self.acc(local, *gain, |gg| {
                    for (k, &gv) in gd.iter().enumerate() {
                        gg[k % c] += gv * xhat[k];
                    }
                });
                self.acc(local, *bias, |gb| {
                    for (k, &gv) in gd.iter().enumerate() {
                        gb[k % c] += gv;
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = self.value(*a).cols();
                self.acc(local, *a, |ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += gd[r * c + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.acc(local, p, |gp| {
                        for r in 0..rows {
                            for j in 0..pc {
                                gp[r * pc + j] += gd[r * total + start + j];
                            }
                        }
                    });
                    start += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(local, p, |gp| {
                        gp.iter_mut().zip(&gd[start..start + len]).for_each(|(x, g)| *x += g)
                    });
                    start += len;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = self.value(*a).cols();
                let (rows, len) = (node.value.rows(), node.value.cols());
                self.acc(local, *a, |ga| {
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * cols + start + j] += gd[r * len + j];
                        }
                    }
                });
            }
            Op::SegmentMax(a, arg) => self.acc(local, *a, |ga| {
                for (k, &src) in arg.iter().enumerate() {
                    ga[src] += gd[k];
                }
            }),
        }
    }

    fn acc(&self, local: &mut [Option<Array>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut local[v.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

fn softmax_along(x: &Array, axis: usize, log: bool) -> Array {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |l: usize| (o * len + l) * inner + k;
            let mx = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|l| (d[at(l)] - mx).exp()).sum();
            let lz = z.ln();
            for l in 0..len {
                out[at(l)] = if log { d[at(l)] - mx - lz } else { (d[at(l)] - mx).exp() / z };
            }
        }
    }
    Array::from_parts(x.shape().to_vec(), out)
}
