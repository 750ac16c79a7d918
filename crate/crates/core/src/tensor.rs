//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: it owns its shape and data and knows nothing
//! about differentiation. Recording happens on a [`crate::autodiff::Tape`],
//! which stores tensors as node values and refers to them by [`crate::autodiff::Var`].
//!
//! Scalars have shape `[]`. Every other shape must consist of positive sizes.
//! Most kernels below work on rank-2 tensors (matrices).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} has a zero-sized dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} entries, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::matrix(n, m, rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data,
        }
    }

    /// Row `i` of a `n×c` one-hot matrix has a 1 in column `positions[i]`.
    pub fn one_hot(positions: &[usize], classes: usize) -> Result<Self> {
        let mut data = vec![0.0; positions.len() * classes];
        for (i, &p) in positions.iter().enumerate() {
            if p >= classes {
                return Err(Error::InvalidTensor(format!(
                    "one-hot position {p} out of range for {classes} classes"
                )));
            }
            data[i * classes + p] = 1.0;
        }
        Self::matrix(positions.len(), classes, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::InvalidTensor(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// `n×m + 1×m`, adding the row vector to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, m) = self.dims2()?;
        if bias.shape != [1, m] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for i in 0..n {
            for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Column sums: `n×m -> 1×m`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (n, m) = self.dims2()?;
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&self.data[i * m..(i + 1) * m]) {
                *o += v;
            }
        }
        Tensor::matrix(1, m, out)
    }

    /// Row sums: `n×m -> n×1`.
    pub fn sum_cols(&self) -> Result<Tensor> {
        let (n, m) = self.dims2()?;
        let out = (0..n)
            .map(|i| self.data[i * m..(i + 1) * m].iter().sum())
            .collect();
        Tensor::matrix(n, 1, out)
    }

    /// `1×m -> n×m` by repeating the row.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        let (r, m) = self.dims2()?;
        if r != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: self.shape.clone(),
                rhs: vec![1, m],
            });
        }
        Tensor::matrix(n, m, self.data.repeat(n))
    }

    /// `n×1 -> n×m` by repeating the column.
    pub fn broadcast_cols(&self, m: usize) -> Result<Tensor> {
        let (n, c) = self.dims2()?;
        if c != 1 {
            return Err(Error::Shape {
                op: "broadcast_cols",
                lhs: self.shape.clone(),
                rhs: vec![n, 1],
            });
        }
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, m))
            .collect();
        Tensor::matrix(n, m, data)
    }

    /// Sum of all entries, left to right.
    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// Fills `shape` with the value of a scalar tensor.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if !self.shape.is_empty() {
            return Err(Error::Shape {
                op: "expand",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::new(shape.to_vec(), vec![self.data[0]; shape.iter().product()])
    }

    pub fn relu(&self) -> Tensor {
        // NaN passes through so divergence stays visible downstream.
        self.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
    }

    /// 1 where the entry is strictly positive, else 0.
    pub fn positive_mask(&self) -> Tensor {
        self.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.map(|z| z.max(0.0) + (-z.abs()).exp().ln_1p())
    }

    /// Row-wise log-softmax with the row maximum subtracted first.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (n, c) = self.dims2()?;
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let row = &self.data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        Tensor::matrix(n, c, out)
    }

    /// `(i, j) -> Σ_k (a_ik − b_jk)²`.
    pub fn pairwise_sq_dist(&self, other: &Tensor) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        let (m, d2) = other.dims2()?;
        if d != d2 {
            return Err(Error::Shape {
                op: "pairwise_sq_dist",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = &self.data[i * d..(i + 1) * d];
            for j in 0..m {
                let b = &other.data[j * d..(j + 1) * d];
                out.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (n, m) = self.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidTensor(format!("row {i} out of range for {n} rows")));
            }
            out.extend_from_slice(&self.data[i * m..(i + 1) * m]);
        }
        Tensor::matrix(idx.len(), m, out)
    }

    /// Adjoint of [`Tensor::gather_rows`]: row `k` is added into row `idx[k]` of an `n×m` zero matrix.
    pub fn scatter_rows(&self, idx: &[usize], n: usize) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        if k != idx.len() {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: self.shape.clone(),
                rhs: vec![idx.len(), m],
            });
        }
        let mut out = vec![0.0; n * m];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::InvalidTensor(format!("row {i} out of range for {n} rows")));
            }
            for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(&self.data[r * m..(r + 1) * m]) {
                *o += v;
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        let (_, m) = first.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != m {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, m, data)
    }

    /// Solves `A X = B` for symmetric positive-definite `A` by Cholesky factorisation.
    pub fn solve_spd(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, n2) = self.dims2()?;
        let (r, m) = rhs.dims2()?;
        if n != n2 || r != n {
            return Err(Error::Shape {
                op: "solve",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        if !self.is_finite() || !rhs.is_finite() {
            return Err(Error::Solver("non-finite input".into()));
        }
        let a = DMatrix::from_row_slice(n, n, &self.data);
        let b = DMatrix::from_row_slice(n, m, &rhs.data);
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Solver("matrix is not positive definite".into()))?;
        let x = chol.solve(&b);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(x[(i, j)]);
            }
        }
        Tensor::matrix(n, m, out)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
