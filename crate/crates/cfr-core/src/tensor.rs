//! Minimal dense f64 arrays with the handful of kernels the pipeline needs:
//! matrix product, row softmax, SPD Cholesky factorization and solves.
//!
//! All reductions run in a fixed sequential index order so repeated runs are
//! bit-identical. No BLAS, no parallelism; sizes here are desk-scale.

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from explicit dims and row-major data.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "extents must be positive, got {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "dims {:?} imply {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("tensor contains non-finite values".into()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Dimension("no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }

    /// Element of a 2-D tensor.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(self.dims.len() == 2);
        self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(self.dims.len() == 2);
        &mut self.data[i * self.dims[1] + j]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.dims[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.dims[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Transpose of a 2-D tensor.
    pub fn transposed(&self) -> Tensor {
        let (m, n) = (self.dims[0], self.dims[1]);
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    /// Elementwise product; shapes must match.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::Dimension(format!(
                "hadamard: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Sum of all entries, sequential order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        if !self.is_matrix() {
            return Err(Error::Dimension(format!(
                "{what}: expected 2-D tensor, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Matrix product of `a` (m x k) and `b` (k x n).
///
/// Summation runs over the inner index in ascending order, so results are
/// reproducible bit-for-bit across runs.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_matrix("matmul lhs")?;
    b.require_matrix("matmul rhs")?;
    let (m, k) = (a.dims[0], a.dims[1]);
    let (k2, n) = (b.dims[0], b.dims[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner extents {k} vs {k2}"
        )));
    }
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out.data[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// Matrix-vector product of `a` (m x k) and `x` (length k).
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    a.require_matrix("matvec lhs")?;
    let (m, k) = (a.dims[0], a.dims[1]);
    if x.len() != k {
        return Err(Error::Dimension(format!(
            "matvec: matrix cols {k} vs vector length {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for p in 0..k {
            acc += a.data[i * k + p] * x[p];
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.require_matrix("softmax_rows")?;
    let (m, n) = (x.dims[0], x.dims[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            out.data[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out.data[i * n + j] /= sum;
        }
    }
    Ok(out)
}

/// Softmax of a single logit vector, same stabilization as [`softmax_rows`].
pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Symmetry tolerance applied before factorizing.
pub const SPD_SYMMETRY_TOL: f64 = 1e-9;

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Returns the lower-triangular factor L with L·Lᵀ = s. A non-positive pivot
/// reports [`Error::NotPositiveDefinite`], which for covariance inputs means
/// the ridge term needs to be raised.
pub fn cholesky_spd(s: &Tensor) -> Result<Tensor> {
    s.require_matrix("cholesky_spd")?;
    let d = s.dims[0];
    if s.dims[1] != d {
        return Err(Error::Dimension(format!(
            "cholesky_spd: matrix must be square, got {:?}",
            s.dims
        )));
    }
    for i in 0..d {
        for j in (i + 1)..d {
            if (s.at(i, j) - s.at(j, i)).abs() > SPD_SYMMETRY_TOL {
                return Err(Error::Input(format!(
                    "cholesky_spd: asymmetry at ({i},{j}): {} vs {}",
                    s.at(i, j),
                    s.at(j, i)
                )));
            }
        }
    }
    let mut l = Tensor::zeros(vec![d, d]);
    for j in 0..d {
        let mut diag = s.at(j, j);
        for k in 0..j {
            diag -= l.at(j, k) * l.at(j, k);
        }
        if diag <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                "pivot {diag:.3e} at column {j}"
            )));
        }
        let ljj = diag.sqrt();
        *l.at_mut(j, j) = ljj;
        for i in (j + 1)..d {
            let mut acc = s.at(i, j);
            for k in 0..j {
                acc -= l.at(i, k) * l.at(j, k);
            }
            *l.at_mut(i, j) = acc / ljj;
        }
    }
    Ok(l)
}

/// Forward substitution: solve L·y = b for lower-triangular L.
pub fn forward_substitute(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    l.require_matrix("forward_substitute")?;
    let d = l.dims[0];
    if l.dims[1] != d || b.len() != d {
        return Err(Error::Dimension(format!(
            "forward_substitute: L {:?} vs b length {}",
            l.dims,
            b.len()
        )));
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l.at(i, k) * y[k];
        }
        let diag = l.at(i, i);
        if diag == 0.0 {
            return Err(Error::Singular(format!("zero diagonal at row {i}")));
        }
        y[i] = acc / diag;
    }
    Ok(y)
}

/// Solve (L·Lᵀ)·x = b given the lower-triangular Cholesky factor L.
///
/// Forward then backward substitution; the inverse is never formed.
pub fn solve_spd(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let d = l.dims[0];
    let y = forward_substitute(l, b)?;
    // Backward pass against Lᵀ.
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut acc = y[i];
        for k in (i + 1)..d {
            acc -= l.at(k, i) * x[k];
        }
        let diag = l.at(i, i);
        if diag == 0.0 {
            return Err(Error::Singular(format!("zero diagonal at row {i}")));
        }
        x[i] = acc / diag;
    }
    Ok(x)
}
