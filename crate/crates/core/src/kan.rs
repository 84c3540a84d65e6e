//! B-spline bases and Kolmogorov–Arnold layers.
//!
//! A KAN layer maps `d_in` features to `d_out` features through one
//! learnable univariate function per (output, input) pair:
//!
//! ```text
//! out[n][j] = bias[j] + Σ_i φ_{j,i}(x[n][i])
//! φ_{j,i}(x) = base[j][i] · silu(x) + Σ_m coef[j][i][m] · (B_m(clamp(x)) − B_m(0))
//! ```
//!
//! Every edge function is anchored at `φ(0) = 0` and the constant
//! `Σ_i φ_{j,i}(0)` of an unanchored layer is carried by `bias[j]`
//! instead. Both parameterizations describe the same functions, but with
//! a wide, mostly-zero input the unanchored one spreads a single bias over
//! `d_in · (order + 1)` coefficients, and Adam then moves it `d_in` times
//! faster than any other parameter.
//!
//! The spline lives on a fixed uniform grid over `[lo, hi]`, extended by
//! `order` knots on each side so that every point of the domain is covered
//! by exactly `order + 1` non-zero basis functions. Inputs outside the
//! domain are clamped for the spline term only; the silu term sees the raw
//! value.
//!
//! Two kernels are provided. The dense one differentiates with respect to
//! its input and is used for hidden layers. The sparse one takes a constant
//! CSR input (bag-of-words features, or propagated features) and only
//! touches stored entries, since an implicit zero contributes nothing.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{silu, silu_grad, CustomOp, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::{axpy, dot, Tensor};

/// Highest spline order the local evaluators support.
pub const MAX_ORDER: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    lo: f64,
    hi: f64,
    grid_size: usize,
    order: usize,
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, grid_size: usize, order: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("spline domain [{lo}, {hi}] is empty")));
        }
        if grid_size == 0 {
            return Err(Error::invalid("grid_size must be at least 1"));
        }
        if order > MAX_ORDER {
            return Err(Error::invalid(format!("spline order {order} exceeds {MAX_ORDER}")));
        }
        Ok(SplineGrid { lo, hi, grid_size, order })
    }

    /// Grid on the default domain `[-1, 1]`.
    pub fn unit(grid_size: usize, order: usize) -> Result<Self> {
        Self::new(-1.0, 1.0, grid_size, order)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.grid_size as f64
    }

    /// Knot `i` of the extended vector, `0 <= i <= grid_size + 2 * order`.
    #[inline]
    pub fn knot(&self, i: usize) -> f64 {
        self.lo + (i as f64 - self.order as f64) * self.step()
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.grid_size + 2 * self.order).map(|i| self.knot(i)).collect()
    }

    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    /// Knot span holding `x` (after clamping); the right end of the domain
    /// belongs to the last interval.
    #[inline]
    fn span(&self, x: f64) -> usize {
        let u = ((x - self.lo) / self.step()).floor();
        let j = if u < 0.0 { 0 } else { (u as usize).min(self.grid_size - 1) };
        j + self.order
    }

    /// Evaluates the `order + 1` basis functions that can be non-zero at
    /// `x`, writing them to `vals[..=order]`. Returns the index of the first
    /// one. Triangular form of the Cox–de Boor recursion.
    pub fn eval_local(&self, x: f64, vals: &mut [f64; MAX_ORDER + 1]) -> usize {
        self.eval_inner(x, vals, None)
    }

    /// As [`eval_local`](Self::eval_local), also writing `dB_m/dx`.
    pub fn eval_local_with_deriv(&self, x: f64, vals: &mut [f64; MAX_ORDER + 1], ders: &mut [f64; MAX_ORDER + 1]) -> usize {
        self.eval_inner(x, vals, Some(ders))
    }

    fn eval_inner(&self, x: f64, vals: &mut [f64; MAX_ORDER + 1], ders: Option<&mut [f64; MAX_ORDER + 1]>) -> usize {
        let x = self.clamp(x);
        let k = self.order;
        let span = self.span(x);
        let mut left = [0.0; MAX_ORDER + 1];
        let mut right = [0.0; MAX_ORDER + 1];
        vals[0] = 1.0;
        let mut prev = [0.0; MAX_ORDER + 1];
        for d in 1..=k {
            if d == k {
                prev[..k].copy_from_slice(&vals[..k]);
            }
            left[d] = x - self.knot(span + 1 - d);
            right[d] = self.knot(span + d) - x;
            let mut saved = 0.0;
            for r in 0..d {
                let temp = vals[r] / (right[r + 1] + left[d - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[d - r] * temp;
            }
            vals[d] = saved;
        }
        if let Some(ders) = ders {
            if k == 0 {
                ders[0] = 0.0;
            } else {
                // Uniform knots: B'_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h.
                let h = self.step();
                for r in 0..=k {
                    let a = if r >= 1 { prev[r - 1] } else { 0.0 };
                    let b = if r < k { prev[r] } else { 0.0 };
                    ders[r] = (a - b) / h;
                }
            }
        }
        span - k
    }

    /// Full vector of `num_basis()` basis values at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut vals = [0.0; MAX_ORDER + 1];
        let start = self.eval_local(x, &mut vals);
        let mut out = vec![0.0; self.num_basis()];
        out[start..start + self.order + 1].copy_from_slice(&vals[..self.order + 1]);
        out
    }
}

/// Input to a KAN layer.
#[derive(Clone)]
pub enum KanInput {
    /// A differentiable dense activation.
    Dense(Var),
    /// A constant sparse matrix; only stored entries are evaluated.
    Sparse(Arc<CsrMatrix>),
}

/// One KAN layer. Parameters live in a [`ParamStore`]:
///
/// * `coef`: `(d_in * num_basis) x d_out`, row `i * num_basis + m` holds
///   `coef[·][i][m]` for every output;
/// * `base`: `d_in x d_out`, so the base path is `silu(H) · base`;
/// * `bias`: `1 x d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    in_dim: usize,
    out_dim: usize,
    grid: SplineGrid,
    coef: ParamId,
    base: ParamId,
    bias: ParamId,
}

impl KanLayer {
    /// Base weights are Glorot-uniform, spline coefficients are
    /// `N(0, (0.1 / √G)²)`, the bias starts at zero.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid(format!("KAN layer dims must be >= 1, got {in_dim}->{out_dim}")));
        }
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let base = Tensor::from_fn(in_dim, out_dim, |_, _| uniform.sample(rng));
        let normal = Normal::new(0.0, 0.1 / (grid.grid_size() as f64).sqrt()).expect("positive std");
        let coef = Tensor::from_fn(in_dim * grid.num_basis(), out_dim, |_, _| normal.sample(rng));
        let coef = store.add(format!("{prefix}.coef"), coef);
        let base = store.add(format!("{prefix}.base"), base);
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(1, out_dim));
        Ok(KanLayer { in_dim, out_dim, grid, coef, base, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn coef_id(&self) -> ParamId {
        self.coef
    }

    pub fn base_id(&self) -> ParamId {
        self.base
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// Spline coefficient `c[out][inp][m]`.
    pub fn coefficient(&self, store: &ParamStore, out: usize, inp: usize, m: usize) -> f64 {
        store.value(self.coef).get(inp * self.grid.num_basis() + m, out)
    }

    /// Base weight `W_b[out][inp]`.
    pub fn base_weight(&self, store: &ParamStore, out: usize, inp: usize) -> f64 {
        store.value(self.base).get(inp, out)
    }

    /// Evaluates `φ_{out,inp}(x)` directly from the definition.
    pub fn edge_function(&self, store: &ParamStore, out: usize, inp: usize, x: f64) -> f64 {
        let (b, b0) = (self.grid.basis(x), self.grid.basis(0.0));
        let spline: f64 = (0..b.len()).map(|m| (b[m] - b0[m]) * self.coefficient(store, out, inp, m)).sum();
        self.base_weight(store, out, inp) * silu(x) + spline
    }

    pub fn forward(&self, tape: &mut Tape<'_>, input: &KanInput) -> Result<Var> {
        let coef = tape.param(self.coef);
        let base = tape.param(self.base);
        let bias = tape.param(self.bias);
        match input {
            KanInput::Dense(x) => {
                let shape = tape.shape(*x);
                if shape.1 != self.in_dim {
                    return Err(Error::Shape { op: "kan_dense", left: shape, right: (self.in_dim, self.out_dim) });
                }
                let out = kan_dense_forward(&self.grid, tape.value(*x), tape.value(coef), tape.value(base), Some(tape.value(bias)), 0);
                let op = KanDenseOp { grid: self.grid, offset: 0, with_bias: true };
                tape.custom(Box::new(op), &[*x, coef, base, bias], out)
            }
            KanInput::Sparse(m) => {
                if m.cols() != self.in_dim {
                    return Err(Error::Shape { op: "kan_sparse", left: m.shape(), right: (self.in_dim, self.out_dim) });
                }
                let out = kan_sparse_forward(&self.grid, m, tape.value(coef), tape.value(base), tape.value(bias));
                let op = KanSparseOp { grid: self.grid, input: Arc::clone(m) };
                tape.custom(Box::new(op), &[coef, base, bias], out)
            }
        }
    }
}

impl KanLayer {
    /// `Σ_i φ_{·,offset+i}(x_i)` over the columns of `x`, without the bias.
    /// Summing this over a column partition of the input and adding the bias
    /// gives [`forward`](Self::forward).
    pub fn forward_partial(&self, tape: &mut Tape<'_>, x: Var, offset: usize) -> Result<Var> {
        let shape = tape.shape(x);
        if offset + shape.1 > self.in_dim {
            return Err(Error::Shape { op: "kan_partial", left: shape, right: (offset, self.in_dim) });
        }
        let coef = tape.param(self.coef);
        let base = tape.param(self.base);
        let bias = tape.param(self.bias);
        let out = kan_dense_forward(&self.grid, tape.value(x), tape.value(coef), tape.value(base), None, offset);
        let op = KanDenseOp { grid: self.grid, offset, with_bias: false };
        tape.custom(Box::new(op), &[x, coef, base, bias], out)
    }
}

/// Layers applied in sequence; adjacent dimensions chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanStack {
    layers: Vec<KanLayer>,
}

impl KanStack {
    /// `dims = [d_0, d_1, ..., d_L]` builds `L` layers.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &[usize], grid: SplineGrid, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("a KAN stack needs at least two dims"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| KanLayer::init(store, &format!("{prefix}.{l}"), w[0], w[1], grid, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(KanStack { layers })
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty stack").out_dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, input: &KanInput) -> Result<Var> {
        let mut h = input.clone();
        for layer in &self.layers {
            h = KanInput::Dense(layer.forward(tape, &h)?);
        }
        match h {
            KanInput::Dense(v) => Ok(v),
            KanInput::Sparse(_) => unreachable!("stack has at least one layer"),
        }
    }
}

fn kan_dense_forward(grid: &SplineGrid, x: &Tensor, coef: &Tensor, base: &Tensor, bias: Option<&Tensor>, offset: usize) -> Tensor {
    let nb = grid.num_basis();
    let k1 = grid.order() + 1;
    let mut zvals = [0.0; MAX_ORDER + 1];
    let zstart = grid.eval_local(0.0, &mut zvals);
    let mut out = Tensor::zeros(x.rows(), base.cols());
    let mut vals = [0.0; MAX_ORDER + 1];
    for n in 0..x.rows() {
        let o = out.row_mut(n);
        if let Some(bias) = bias {
            o.copy_from_slice(bias.row(0));
        }
        for (j, &xv) in x.row(n).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let i = offset + j;
            axpy(silu(xv), base.row(i), o);
            let start = grid.eval_local(xv, &mut vals);
            sparse_delta(start, &vals[..k1], zstart, &zvals[..k1], |row, w| axpy(w, coef.row(i * nb + row), o));
        }
    }
    out
}

struct KanDenseOp {
    grid: SplineGrid,
    /// Index of the first layer input covered by `x`.
    offset: usize,
    with_bias: bool,
}

impl CustomOp for KanDenseOp {
    fn name(&self) -> &'static str {
        "kan_dense"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, coef, base) = (inputs[0], inputs[1], inputs[2]);
        let grid = &self.grid;
        let nb = grid.num_basis();
        let k1 = grid.order() + 1;
        let mut zvals = [0.0; MAX_ORDER + 1];
        let zstart = grid.eval_local(0.0, &mut zvals);
        let mut gx = needs[0].then(|| Tensor::zeros(x.rows(), x.cols()));
        let mut gc = needs[1].then(|| Tensor::zeros(coef.rows(), coef.cols()));
        let mut gb = needs[2].then(|| Tensor::zeros(base.rows(), base.cols()));
        let gbias = (needs[3] && self.with_bias).then(|| column_sums(g));
        let mut vals = [0.0; MAX_ORDER + 1];
        let mut ders = [0.0; MAX_ORDER + 1];
        for n in 0..x.rows() {
            let gn = g.row(n);
            for (j, &xv) in x.row(n).iter().enumerate() {
                let i = self.offset + j;
                let start = grid.eval_local_with_deriv(xv, &mut vals, &mut ders);
                if let Some(gb) = gb.as_mut() {
                    axpy(silu(xv), gn, gb.row_mut(i));
                }
                if let Some(gc) = gc.as_mut() {
                    sparse_delta(start, &vals[..k1], zstart, &zvals[..k1], |row, w| axpy(w, gn, gc.row_mut(i * nb + row)));
                }
                if let Some(gx) = gx.as_mut() {
                    let mut d = silu_grad(xv) * dot(base.row(i), gn);
                    if xv >= grid.lo() && xv <= grid.hi() {
                        for (r, &db) in ders[..k1].iter().enumerate() {
                            d += db * dot(coef.row(i * nb + start + r), gn);
                        }
                    }
                    gx.set(n, j, d);
                }
            }
        }
        Ok(vec![gx, gc, gb, gbias])
    }
}

fn kan_sparse_forward(grid: &SplineGrid, x: &CsrMatrix, coef: &Tensor, base: &Tensor, bias: &Tensor) -> Tensor {
    let nb = grid.num_basis();
    let k1 = grid.order() + 1;
    let mut zvals = [0.0; MAX_ORDER + 1];
    let zstart = grid.eval_local(0.0, &mut zvals);
    let mut out = Tensor::zeros(x.rows(), base.cols());
    let mut vals = [0.0; MAX_ORDER + 1];
    for n in 0..x.rows() {
        let o = out.row_mut(n);
        o.copy_from_slice(bias.row(0));
        let (cols, xs) = x.row(n);
        for (&i, &xv) in cols.iter().zip(xs) {
            axpy(silu(xv), base.row(i), o);
            let start = grid.eval_local(xv, &mut vals);
            sparse_delta(start, &vals[..k1], zstart, &zvals[..k1], |row, w| axpy(w, coef.row(i * nb + row), o));
        }
    }
    out
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut sums = Tensor::zeros(1, g.cols());
    for n in 0..g.rows() {
        axpy(1.0, g.row(n), sums.row_mut(0));
    }
    sums
}

/// Visits the coefficient rows weighted by `B(x) − B(0)`: `+vals` at
/// `start`, `-zvals` at `zstart`.
#[inline]
fn sparse_delta(start: usize, vals: &[f64], zstart: usize, zvals: &[f64], mut f: impl FnMut(usize, f64)) {
    if start == zstart {
        for r in 0..vals.len() {
            let w = vals[r] - zvals[r];
            if w != 0.0 {
                f(start + r, w);
            }
        }
    } else {
        for r in 0..vals.len() {
            if vals[r] != 0.0 {
                f(start + r, vals[r]);
            }
            if zvals[r] != 0.0 {
                f(zstart + r, -zvals[r]);
            }
        }
    }
}

struct KanSparseOp {
    grid: SplineGrid,
    input: Arc<CsrMatrix>,
}

impl CustomOp for KanSparseOp {
    fn name(&self) -> &'static str {
        "kan_sparse"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (coef, base) = (inputs[0], inputs[1]);
        let grid = &self.grid;
        let x = &*self.input;
        let nb = grid.num_basis();
        let k1 = grid.order() + 1;
        let mut zvals = [0.0; MAX_ORDER + 1];
        let zstart = grid.eval_local(0.0, &mut zvals);

        let mut gc = needs[0].then(|| Tensor::zeros(coef.rows(), coef.cols()));
        let mut gb = needs[1].then(|| Tensor::zeros(base.rows(), base.cols()));
        let gbias = needs[2].then(|| column_sums(g));
        let mut vals = [0.0; MAX_ORDER + 1];
        for n in 0..x.rows() {
            let gn = g.row(n);
            let (cols, xs) = x.row(n);
            for (&i, &xv) in cols.iter().zip(xs) {
                if let Some(gb) = gb.as_mut() {
                    axpy(silu(xv), gn, gb.row_mut(i));
                }
                if let Some(gc) = gc.as_mut() {
                    let start = grid.eval_local(xv, &mut vals);
                    sparse_delta(start, &vals[..k1], zstart, &zvals[..k1], |row, w| axpy(w, gn, gc.row_mut(i * nb + row)));
                }
            }
        }
        Ok(vec![gc, gb, gbias])
    }
}
