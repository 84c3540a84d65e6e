//! Compressed sparse row matrices.
//!
//! Used both for the normalized adjacency and for bag-of-words feature
//! matrices, which are mostly zeros.

use crate::error::{Error, Result};
use crate::tensor::{axpy, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from unsorted `(row, col, value)` triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::invalid(format!("triplet ({r}, {c}) outside {rows}x{cols}")));
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(CsrMatrix { rows, cols, indptr, indices, values })
    }

    /// Keeps every non-zero entry of a dense tensor.
    pub fn from_dense(t: &Tensor) -> Self {
        let mut indptr = Vec::with_capacity(t.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix { rows: t.rows(), cols: t.cols(), indptr, indices, values }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |i| vals[i])
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                t.set(r, c, v);
            }
        }
        t
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            triplets.extend(cols.iter().zip(vals).map(|(&c, &v)| (c, r, v)));
        }
        CsrMatrix::from_triplets(self.cols, self.rows, triplets).expect("transpose stays in bounds")
    }

    /// Same sparsity pattern, values replaced by `f(row, col, value)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> CsrMatrix {
        let mut values = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            values.extend(cols.iter().zip(vals).map(|(&c, &v)| f(r, c, v)));
        }
        CsrMatrix { values, ..self.clone() }
    }

    /// Keeps entries for which `f(row, col, value)` returns a value.
    pub fn filter_map_values(&self, mut f: impl FnMut(usize, usize, f64) -> Option<f64>) -> CsrMatrix {
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        indptr.push(0);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if let Some(w) = f(r, c, v) {
                    indices.push(c);
                    values.push(w);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix { rows: self.rows, cols: self.cols, indptr, indices, values }
    }

    /// `self · rhs` for dense `rhs`.
    pub fn matmul_dense(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows() {
            return Err(Error::Shape { op: "spmm", left: self.shape(), right: rhs.shape() });
        }
        let mut out = Tensor::zeros(self.rows, rhs.cols());
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let o = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                axpy(v, rhs.row(c), o);
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` for dense `rhs`, the adjoint used in backward passes.
    pub fn t_matmul_dense(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rows != rhs.rows() {
            return Err(Error::Shape { op: "spmm_t", left: self.shape(), right: rhs.shape() });
        }
        let mut out = Tensor::zeros(self.cols, rhs.cols());
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let g = rhs.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                axpy(v, g, out.row_mut(c));
            }
        }
        Ok(out)
    }

    /// Sparse-sparse product, accumulating each output row densely.
    pub fn matmul_sparse(&self, rhs: &CsrMatrix) -> Result<CsrMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape { op: "spgemm", left: self.shape(), right: rhs.shape() });
        }
        let mut acc = vec![0.0; rhs.cols];
        let mut touched = vec![false; rhs.cols];
        let mut pattern: Vec<usize> = Vec::new();
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&k, &a) in cols.iter().zip(vals) {
                let (rc, rv) = rhs.row(k);
                for (&c, &b) in rc.iter().zip(rv) {
                    if !touched[c] {
                        touched[c] = true;
                        pattern.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            pattern.sort_unstable();
            for &c in &pattern {
                if acc[c] != 0.0 {
                    indices.push(c);
                    values.push(acc[c]);
                }
                acc[c] = 0.0;
                touched[c] = false;
            }
            pattern.clear();
            indptr.push(indices.len());
        }
        Ok(CsrMatrix { rows: self.rows, cols: rhs.cols, indptr, indices, values })
    }
}
