//! Reverse-mode differentiation over a linear trace of matrix operations.
//!
//! Every operation appends a node to the [`Tape`]. [`Tape::backward`] walks the
//! nodes in reverse and records the vector-Jacobian products as *new nodes on
//! the same tape*, so a gradient is itself a differentiable value. First-order
//! callers read gradient values and ignore the extra nodes; second-order
//! callers keep building on the returned gradient vars.
//!
//! Piecewise operations (`relu`, `max`, `clamp`) and the masks used by the
//! adjacency refinement take their selection pattern from the forward values
//! and treat it as a constant during the backward pass.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map over rows: `out[o] += coef * input[i]` for every entry.
///
/// Gathers, scatters, embedding lookups and row permutations are all instances.
#[derive(Debug, Clone)]
pub struct RowMap {
    pub n_in: usize,
    pub n_out: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl RowMap {
    pub fn new(n_in: usize, n_out: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(o, i, _)) = entries.iter().find(|(o, i, _)| *o >= n_out || *i >= n_in) {
            return Err(dim_err!(
                "row map entry ({o}, {i}) outside {n_out} outputs x {n_in} inputs"
            ));
        }
        Ok(Self { n_in, n_out, entries })
    }

    /// Selects `rows` of the input in order.
    pub fn gather(n_in: usize, rows: &[usize]) -> Result<Self> {
        Self::new(
            n_in,
            rows.len(),
            rows.iter().enumerate().map(|(o, &i)| (o, i, 1.0)).collect(),
        )
    }

    fn adjoint(&self) -> Self {
        Self {
            n_in: self.n_out,
            n_out: self.n_in,
            entries: self.entries.iter().map(|&(o, i, c)| (i, o, c)).collect(),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.n_in {
            return Err(dim_err!(
                "row map expects {} input rows, got {}",
                self.n_in,
                x.rows()
            ));
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(self.n_out, cols);
        let data = out.data_mut();
        for &(o, i, coef) in &self.entries {
            let src = x.row(i);
            for (d, s) in data[o * cols..(o + 1) * cols].iter_mut().zip(src) {
                *d += coef * s;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Max,
    Scale(f64),
    AddScalar,
    Transpose,
    Reshape,
    Relu,
    Sigmoid,
    Log,
    Recip,
    Clamp(f64, f64),
    SoftmaxRows,
    RowSum,
    ColSum,
    BroadcastCols,
    BroadcastRows,
    ConcatRows,
    ConcatCols,
    SliceCols { start: usize },
    PadCols { start: usize },
    RowCombine(Arc<RowMap>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// A computation trace. Confined to one thread of execution.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient vars produced by [`Tape::backward`], indexed by forward node.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Var>>,
}

impl Grads {
    /// The gradient as a differentiable var, if the node was reached.
    pub fn var(&self, v: Var) -> Option<Var> {
        self.slots.get(v.0).copied().flatten()
    }

    pub fn value<'t>(&self, tape: &'t Tape, v: Var) -> Option<&'t Tensor> {
        self.var(v).map(|g| tape.value(g))
    }

    /// Gradient value, or zeros shaped like `v` when `v` was not reached.
    pub fn value_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        match self.value(tape, v) {
            Some(t) => t.clone(),
            None => {
                let s = tape.value(v);
                Tensor::zeros(s.rows(), s.cols())
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Result<Var> {
        if !value.all_finite() {
            return Err(contract_err!("non-finite value produced by {op:?}"));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Re-enters the current value of `v` as a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(value, Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        self.push(value, Op::Mul, vec![a, b])
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "max", f64::max)?;
        self.push(value, Op::Max, vec![a, b])
    }

    /// Multiplies by a constant tensor of identical shape.
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let m = self.constant(mask);
        self.mul(a, m)
    }

    pub fn add_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let c = self.constant(c);
        self.add(a, c)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(s), vec![a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::AddScalar, vec![a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose, vec![a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(rows, cols)?;
        self.push(value, Op::Reshape, vec![a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu, vec![a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid, vec![a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|v| *v <= 0.0) {
            return Err(contract_err!("log of a non-positive value"));
        }
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log, vec![a])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| 1.0 / v);
        self.push(value, Op::Recip, vec![a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(lo, hi), vec![a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                out.set(r, c, e / z);
            }
        }
        self.push(out, Op::SoftmaxRows, vec![a])
    }

    /// `[r, c] -> [r, 1]`
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::from_fn(x.rows(), 1, |r, _| x.row(r).iter().sum());
        self.push(value, Op::RowSum, vec![a])
    }

    /// `[r, c] -> [1, c]`
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::from_fn(1, x.cols(), |_, c| (0..x.rows()).map(|r| x.get(r, c)).sum());
        self.push(value, Op::ColSum, vec![a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let r = self.row_sum(a)?;
        self.col_sum(r)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `[r, 1] -> [r, n]`
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.cols() != 1 {
            return Err(dim_err!("broadcast_cols needs a column, got {:?}", x.shape()));
        }
        let value = Tensor::from_fn(x.rows(), n, |r, _| x.get(r, 0));
        self.push(value, Op::BroadcastCols, vec![a])
    }

    /// `[1, c] -> [n, c]`
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(dim_err!("broadcast_rows needs a row, got {:?}", x.shape()));
        }
        let value = Tensor::from_fn(n, x.cols(), |_, c| x.get(0, c));
        self.push(value, Op::BroadcastRows, vec![a])
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).rows();
        let b = self.broadcast_rows(row, n)?;
        self.add(a, b)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat_rows of nothing"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(dim_err!("concat_rows: widths {} and {} differ", cols, t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push(value, Op::ConcatRows, parts.to_vec())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(dim_err!(
                "concat_cols: heights {} and {} differ",
                rows,
                self.value(*p).rows()
            ));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push(value, Op::ConcatCols, parts.to_vec())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if len == 0 || start + len > x.cols() {
            return Err(dim_err!(
                "slice_cols {start}..{} of width {}",
                start + len,
                x.cols()
            ));
        }
        let value = Tensor::from_fn(x.rows(), len, |r, c| x.get(r, start + c));
        self.push(value, Op::SliceCols { start }, vec![a])
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let x = self.value(a);
        let w = x.cols();
        let value = Tensor::from_fn(x.rows(), total, |r, c| {
            if c >= start && c < start + w {
                x.get(r, c - start)
            } else {
                0.0
            }
        });
        self.push(value, Op::PadCols { start }, vec![a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(a).rows();
        if len == 0 || start + len > n {
            return Err(dim_err!("slice_rows {start}..{} of height {n}", start + len));
        }
        let rows: Vec<usize> = (start..start + len).collect();
        self.row_combine(a, Arc::new(RowMap::gather(n, &rows)?))
    }

    pub fn row_combine(&mut self, a: Var, map: Arc<RowMap>) -> Result<Var> {
        let value = map.apply(self.value(a))?;
        self.push(value, Op::RowCombine(map), vec![a])
    }

    /// Applies `op` elementwise.
    pub fn ewise(&mut self, a: Var, b: Var, op: super::tensor::EwiseOp) -> Result<Var> {
        use super::tensor::EwiseOp;
        match op {
            EwiseOp::Product => self.mul(a, b),
            EwiseOp::Max => self.max(a, b),
            EwiseOp::Sum => self.add(a, b),
        }
    }

    /// Gradients of scalar `seed` with respect to every node that needs one.
    pub fn backward(&mut self, seed: Var) -> Result<Grads> {
        self.backward_impl(seed, None)
    }

    /// Like [`Tape::backward`], but only propagates along paths that reach one
    /// of `targets`.
    pub fn backward_to(&mut self, seed: Var, targets: &[Var]) -> Result<Grads> {
        self.backward_impl(seed, Some(targets))
    }

    fn backward_impl(&mut self, seed: Var, targets: Option<&[Var]>) -> Result<Grads> {
        if !self.value(seed).is_scalar() {
            return Err(contract_err!(
                "backward seed must be scalar, got {:?}",
                self.value(seed).shape()
            ));
        }
        let n = seed.0 + 1;
        let relevant: Vec<bool> = match targets {
            None => self.nodes[..n].iter().map(|node| node.requires_grad).collect(),
            Some(ts) => {
                let mut rel = vec![false; n];
                for t in ts {
                    if t.0 < n && self.nodes[t.0].requires_grad {
                        rel[t.0] = true;
                    }
                }
                for i in 0..n {
                    if !rel[i] && self.nodes[i].inputs.iter().any(|v| rel[v.0]) {
                        rel[i] = true;
                    }
                }
                rel
            }
        };
        let mut slots: Vec<Option<Var>> = vec![None; n];
        if !relevant[seed.0] {
            return Ok(Grads { slots });
        }
        slots[seed.0] = Some(self.constant(Tensor::scalar(1.0)));

        for i in (0..n).rev() {
            let Some(g) = slots[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let contribs = self.vjp(&op, Var(i), &inputs, g)?;
            for (input, c) in inputs.iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !relevant[input.0] {
                    continue;
                }
                slots[input.0] = Some(match slots[input.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        Ok(Grads { slots })
    }

    fn vjp(&mut self, op: &Op, out: Var, inputs: &[Var], g: Var) -> Result<Vec<Option<Var>>> {
        let a = inputs.first().copied();
        let grads = match op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bt = self.transpose(b)?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, g)?;
                vec![Some(da), Some(db)]
            }
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => {
                let nb = self.neg(g)?;
                vec![Some(g), Some(nb)]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = self.mul(g, b)?;
                let db = self.mul(g, a)?;
                vec![Some(da), Some(db)]
            }
            Op::Max => {
                let (a, b) = (inputs[0], inputs[1]);
                let mask = self
                    .value(a)
                    .zip_with(self.value(b), "max mask", |x, y| if x >= y { 1.0 } else { 0.0 })?;
                let other = mask.map(|m| 1.0 - m);
                let da = self.mul_const(g, mask)?;
                let db = self.mul_const(g, other)?;
                vec![Some(da), Some(db)]
            }
            Op::Scale(s) => vec![Some(self.scale(g, *s)?)],
            Op::AddScalar => vec![Some(g)],
            Op::Transpose => vec![Some(self.transpose(g)?)],
            Op::Reshape => {
                let [r, c] = self.value(a.unwrap()).shape();
                vec![Some(self.reshape(g, r, c)?)]
            }
            Op::Relu => {
                let mask = self.value(a.unwrap()).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![Some(self.mul_const(g, mask)?)]
            }
            Op::Sigmoid => {
                let gy = self.mul(g, out)?;
                let neg = self.neg(out)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                vec![Some(self.mul(gy, one_minus)?)]
            }
            Op::Log => {
                let r = self.recip(a.unwrap())?;
                vec![Some(self.mul(g, r)?)]
            }
            Op::Recip => {
                let sq = self.mul(out, out)?;
                let t = self.mul(g, sq)?;
                vec![Some(self.neg(t)?)]
            }
            Op::Clamp(lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = self
                    .value(a.unwrap())
                    .map(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                vec![Some(self.mul_const(g, mask)?)]
            }
            Op::SoftmaxRows => {
                let cols = self.value(out).cols();
                let gy = self.mul(g, out)?;
                let s = self.row_sum(gy)?;
                let sb = self.broadcast_cols(s, cols)?;
                let ys = self.mul(out, sb)?;
                vec![Some(self.sub(gy, ys)?)]
            }
            Op::RowSum => {
                let cols = self.value(a.unwrap()).cols();
                vec![Some(self.broadcast_cols(g, cols)?)]
            }
            Op::ColSum => {
                let rows = self.value(a.unwrap()).rows();
                vec![Some(self.broadcast_rows(g, rows)?)]
            }
            Op::BroadcastCols => vec![Some(self.row_sum(g)?)],
            Op::BroadcastRows => vec![Some(self.col_sum(g)?)],
            Op::ConcatRows => {
                let mut out = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for p in inputs {
                    let r = self.value(*p).rows();
                    out.push(Some(self.slice_rows(g, offset, r)?));
                    offset += r;
                }
                out
            }
            Op::ConcatCols => {
                let mut out = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for p in inputs {
                    let c = self.value(*p).cols();
                    out.push(Some(self.slice_cols(g, offset, c)?));
                    offset += c;
                }
                out
            }
            Op::SliceCols { start, .. } => {
                let total = self.value(a.unwrap()).cols();
                vec![Some(self.pad_cols(g, *start, total)?)]
            }
            Op::PadCols { start, .. } => {
                let w = self.value(a.unwrap()).cols();
                vec![Some(self.slice_cols(g, *start, w)?)]
            }
            Op::RowCombine(map) => {
                let adj = Arc::new(map.adjoint());
                vec![Some(self.row_combine(g, adj)?)]
            }
        };
        Ok(grads)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
