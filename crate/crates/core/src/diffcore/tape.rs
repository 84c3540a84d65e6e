//! Wengert tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node whose inputs all
//! have smaller ids, so the node vector is already in topological order and
//! backward is a single reverse sweep.

use std::sync::Arc;

use super::param::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::{axpy, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// A fused operation with a hand-written vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` where `needs_grad[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op<'p> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    SparseMatMul(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Elu(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    Custom(Box<dyn CustomOp + 'p>, Vec<Var>),
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::SparseMatMul(..) => "sparse_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Relu(_) => "relu",
            Op::Elu(_) => "elu",
            Op::Silu(_) => "silu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRow(a, b) | Op::Hadamard(a, b) | Op::ScaleRows(a, b) => {
                vec![*a, *b]
            }
            Op::SparseMatMul(_, a)
            | Op::Scale(a, _)
            | Op::SliceCols(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::LeakyRelu(a, _)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::SegmentSoftmax(a, _) => vec![*a],
            Op::ConcatCols(vs) | Op::Custom(_, vs) => vs.clone(),
        }
    }
}

struct Node<'p> {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op<'p>,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; useful for pure forward evaluation.
    pub fn new() -> Self {
        Tape { params: None, nodes: Vec::new(), consumed: false }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape { params: Some(params), nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<'p>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|&i| self.needs(i));
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("tape has no parameter store");
        assert!(id.0 < store.len(), "parameter id out of range");
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, left: sa, right: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out)
    }

    /// `lhs · b` for a constant sparse `lhs`.
    pub fn sparse_matmul(&mut self, lhs: Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let out = lhs.matmul_dense(self.value(b))?;
        self.push(Op::SparseMatMul(lhs, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), out)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::Shape { op: "add_row", left: sa, right: sr });
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("hadamard", a, b)?;
        let out = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        self.push(Op::Hadamard(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(Op::Scale(a, s), out)
    }

    /// Multiplies row `i` of `a` by `w[i]`, where `w` is `rows x 1`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sw != (sa.0, 1) {
            return Err(Error::Shape { op: "scale_rows", left: sa, right: sw });
        }
        let mut out = self.value(a).clone();
        let wv = self.value(w).data().to_vec();
        for (i, &s) in wv.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        self.push(Op::ScaleRows(a, w), out)
    }

    /// Concatenates along the column (feature) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape { op: "concat_cols", left: self.shape(first), right: self.shape(p) });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.1 {
            return Err(Error::Shape { op: "slice_cols", left: s, right: (start, len) });
        }
        let src = self.value(a);
        let out = Tensor::from_fn(s.0, len, |r, c| src.get(r, start + c));
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax_rows();
        self.push(Op::LogSoftmaxRows(a), out)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let s = LEAKY_RELU_SLOPE;
        let out = self.value(a).map(|x| if x > 0.0 { x } else { s * x });
        self.push(Op::LeakyRelu(a, s), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(elu);
        self.push(Op::Elu(a), out)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        self.push(Op::Silu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), out)
    }

    /// `out[e] = a[idx[e]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape { op: "gather_rows", left: t.shape(), right: (bad, 0) });
        }
        let out = t.select_rows(&idx);
        self.push(Op::GatherRows(a, idx), out)
    }

    /// `out[idx[e]] += a[e]`, with `out` having `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<[usize]>, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape { op: "scatter_add_rows", left: t.shape(), right: (idx.len(), rows) });
        }
        let mut out = Tensor::zeros(rows, t.cols());
        for (e, &i) in idx.iter().enumerate() {
            axpy(1.0, t.row(e), out.row_mut(i));
        }
        self.push(Op::ScatterAddRows(a, idx), out)
    }

    /// Softmax of each column of `a` (`E x c`) over the rows sharing a
    /// segment id. Used for attention over each node's incoming edges.
    pub fn segment_softmax(&mut self, a: Var, segments: Arc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        if segments.len() != t.rows() {
            return Err(Error::Shape { op: "segment_softmax", left: t.shape(), right: (segments.len(), 1) });
        }
        let out = segment_softmax(t, &segments);
        self.push(Op::SegmentSoftmax(a, segments), out)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp + 'p>, inputs: &[Var], value: Tensor) -> Result<Var> {
        self.push(Op::Custom(op, inputs.to_vec()), value)
    }

    /// Reverse sweep from a `1 x 1` loss. A tape can only be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut by_param: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Param(pid) = self.nodes[id].op {
                accumulate(&mut by_param[pid.0], g);
                continue;
            }
            for (input, contrib) in self.vjp(id, &g)? {
                accumulate(&mut grads[input.0], contrib);
            }
        }
        Ok(Gradients { by_param })
    }

    /// Gradient contributions of node `id` to its inputs.
    fn vjp(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let out = node.value.as_ref().expect("interior node has a value");
        let mut res = Vec::with_capacity(2);
        let mut push = |v: Var, t: Tensor| {
            if self.needs(v) {
                res.push((v, t));
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    push(*a, g.matmul_t(self.value(*b))?);
                }
                if self.needs(*b) {
                    push(*b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::SparseMatMul(lhs, b) => push(*b, lhs.t_matmul_dense(g)?),
            Op::Add(a, b) => {
                push(*a, g.clone());
                push(*b, g.clone());
            }
            Op::Sub(a, b) => {
                push(*a, g.clone());
                push(*b, g.scale(-1.0));
            }
            Op::AddRow(a, row) => {
                push(*a, g.clone());
                if self.needs(*row) {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        axpy(1.0, g.row(i), r.row_mut(0));
                    }
                    push(*row, r);
                }
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    push(*a, g.zip_map(self.value(*b), "hadamard", |x, y| x * y)?);
                }
                if self.needs(*b) {
                    push(*b, g.zip_map(self.value(*a), "hadamard", |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => push(*a, g.scale(*s)),
            Op::ScaleRows(a, w) => {
                let wv = self.value(*w);
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = wv.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    push(*a, ga);
                }
                if self.needs(*w) {
                    let av = self.value(*a);
                    let gw = Tensor::from_fn(g.rows(), 1, |i, _| crate::tensor::dot(g.row(i), av.row(i)));
                    push(*w, gw);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        push(p, Tensor::from_fn(g.rows(), w, |r, c| g.get(r, off + c)));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                push(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let d = crate::tensor::dot(y, gr);
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - d);
                    }
                }
                push(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = gi - yi.exp() * total;
                    }
                }
                push(*a, ga);
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                push(*a, g.zip_map(self.value(*a), "leaky_relu", |gi, x| if x > 0.0 { gi } else { s * gi })?);
            }
            Op::Relu(a) => push(*a, g.zip_map(self.value(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?),
            Op::Elu(a) => push(*a, g.zip_map(self.value(*a), "elu", |gi, x| if x > 0.0 { gi } else { gi * x.exp() })?),
            Op::Silu(a) => push(*a, g.zip_map(self.value(*a), "silu", |gi, x| gi * silu_grad(x))?),
            Op::Exp(a) => push(*a, g.zip_map(out, "exp", |gi, y| gi * y)?),
            Op::Log(a) => push(*a, g.zip_map(self.value(*a), "log", |gi, x| gi / x)?),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                push(*a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                push(*a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (e, &i) in idx.iter().enumerate() {
                    axpy(1.0, g.row(e), ga.row_mut(i));
                }
                push(*a, ga);
            }
            Op::ScatterAddRows(a, idx) => push(*a, g.select_rows(idx)),
            Op::SegmentSoftmax(a, seg) => {
                let cols = g.cols();
                let n_seg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dots = Tensor::zeros(n_seg, cols);
                for (e, &s) in seg.iter().enumerate() {
                    for c in 0..cols {
                        let v = dots.get(s, c) + out.get(e, c) * g.get(e, c);
                        dots.set(s, c, v);
                    }
                }
                let ga = Tensor::from_fn(g.rows(), cols, |e, c| out.get(e, c) * (g.get(e, c) - dots.get(seg[e], c)));
                push(*a, ga);
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let contribs = op.backward(&values, out, g, &needs)?;
                for (&v, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        push(v, c);
                    }
                }
            }
        }
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn segment_softmax(t: &Tensor, seg: &[usize]) -> Tensor {
    let cols = t.cols();
    let n_seg = seg.iter().max().map_or(0, |m| m + 1);
    let mut max = Tensor::filled(n_seg, cols, f64::NEG_INFINITY);
    for (e, &s) in seg.iter().enumerate() {
        for c in 0..cols {
            max.set(s, c, max.get(s, c).max(t.get(e, c)));
        }
    }
    let mut out = Tensor::from_fn(t.rows(), cols, |e, c| (t.get(e, c) - max.get(seg[e], c)).exp());
    let mut total = Tensor::zeros(n_seg, cols);
    for (e, &s) in seg.iter().enumerate() {
        for c in 0..cols {
            total.set(s, c, total.get(s, c) + out.get(e, c));
        }
    }
    for (e, &s) in seg.iter().enumerate() {
        for c in 0..cols {
            out.set(e, c, out.get(e, c) / total.get(s, c));
        }
    }
    out
}
