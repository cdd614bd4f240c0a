//! Dense K-way tensors, matricization and Tucker products.
//!
//! Data are stored in generalized column-major order: the multi-index
//! `(i_1, ..., i_K)` lives at offset `i_1 + i_2 m_1 + i_3 m_1 m_2 + ...`.
//! Under this layout the vectorized Tucker product is multiplication by
//! `B_K ⊗ ... ⊗ B_1`, and the mode-k unfolding satisfies
//! `M_(k) = B_k X_(k) (B_K ⊗ ... ⊗ B_{k+1} ⊗ B_{k-1} ⊗ ... ⊗ B_1)^T`.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Splits `dims` around mode `k` into (product before, m_k, product after).
pub(crate) fn mode_split(dims: &[usize], k: usize) -> (usize, usize, usize) {
    let left = dims[..k].iter().product();
    let right = dims[k + 1..].iter().product();
    (left, dims[k], right)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} entries, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite entry at offset {pos}")));
        }
        Ok(Self { dims, data })
    }

    /// Builds without validation; callers guarantee the length invariant.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::from_parts(dims.to_vec(), vec![0.0; dims.iter().product()])
    }

    /// Fills the tensor by evaluating `f` at every multi-index, in storage order.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..len {
            data.push(f(&idx));
            for (i, d) in idx.iter_mut().zip(dims) {
                *i += 1;
                if *i < *d {
                    break;
                }
                *i = 0;
            }
        }
        Self::from_parts(dims.to_vec(), data)
    }

    /// A matrix as a 2-way tensor.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self::from_parts(vec![m.nrows(), m.ncols()], m.as_slice().to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The vec of the tensor: entries in linearization order.
    pub fn vectorize(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        let mut stride = 1;
        for (i, d) in idx.iter().zip(&self.dims) {
            debug_assert!(i < d);
            off += i * stride;
            stride *= d;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    fn check_mode(&self, k: usize) -> Result<()> {
        if k >= self.order() {
            return Err(Error::ModeOutOfRange { mode: k, order: self.order() });
        }
        Ok(())
    }

    /// Mode-k unfolding: an `m_k × ∏_{j≠k} m_j` matrix whose column index
    /// runs over the remaining modes in increasing order, first mode fastest.
    pub fn matricize(&self, k: usize) -> Result<DMatrix<f64>> {
        self.check_mode(k)?;
        let (left, mk, right) = mode_split(&self.dims, k);
        if left == 1 {
            return Ok(DMatrix::from_column_slice(mk, right, &self.data));
        }
        let mut out = DMatrix::zeros(mk, left * right);
        for r in 0..right {
            let slab = &self.data[left * mk * r..left * mk * (r + 1)];
            for i in 0..mk {
                for l in 0..left {
                    out[(i, l + left * r)] = slab[l + left * i];
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::matricize`].
    pub fn unmatricize(m: &DMatrix<f64>, k: usize, dims: &[usize]) -> Result<Self> {
        if k >= dims.len() {
            return Err(Error::ModeOutOfRange { mode: k, order: dims.len() });
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {dims:?}")));
        }
        let (left, mk, right) = mode_split(dims, k);
        if m.nrows() != mk || m.ncols() != left * right {
            return Err(Error::Shape(format!(
                "matrix {}x{} does not unfold dims {dims:?} along mode {k}",
                m.nrows(),
                m.ncols()
            )));
        }
        if left == 1 {
            return Ok(Self::from_parts(dims.to_vec(), m.as_slice().to_vec()));
        }
        let mut data = vec![0.0; m.len()];
        for r in 0..right {
            let slab = &mut data[left * mk * r..left * mk * (r + 1)];
            for i in 0..mk {
                for l in 0..left {
                    slab[l + left * i] = m[(i, l + left * r)];
                }
            }
        }
        Ok(Self::from_parts(dims.to_vec(), data))
    }

    /// Mode-k product `X ×_k B`: replaces mode k (size `B.ncols()`) with
    /// `B.nrows()`, i.e. `(X ×_k B)_(k) = B X_(k)`.
    pub fn mode_product(&self, k: usize, b: &DMatrix<f64>) -> Result<Self> {
        self.check_mode(k)?;
        let (left, mk, right) = mode_split(&self.dims, k);
        if b.ncols() != mk {
            return Err(Error::Shape(format!(
                "mode {k} has size {mk} but factor is {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let rows = b.nrows();
        let mut dims = self.dims.clone();
        dims[k] = rows;
        let mut out = vec![0.0; left * rows * right];
        if left == 1 {
            let x = DMatrixView::from_slice(&self.data, mk, right);
            let mut o = DMatrixViewMut::from_slice(&mut out, rows, right);
            o.gemm(1.0, b, &x, 0.0);
        } else {
            let bt = b.transpose();
            out.par_chunks_mut(left * rows)
                .zip(self.data.par_chunks(left * mk))
                .for_each(|(o, x)| {
                    let x = DMatrixView::from_slice(x, left, mk);
                    let mut o = DMatrixViewMut::from_slice(o, left, rows);
                    o.gemm(1.0, &x, &bt, 0.0);
                });
        }
        Ok(Self::from_parts(dims, out))
    }

    /// Applies `ops[k]` along every mode where it is `Some`; `None` leaves the
    /// mode untouched (an identity factor).
    pub fn multi_mode_product(&self, ops: &[Option<&DMatrix<f64>>]) -> Result<Self> {
        if ops.len() != self.order() {
            return Err(Error::Shape(format!(
                "{} factors supplied for a tensor of order {}",
                ops.len(),
                self.order()
            )));
        }
        let mut cur: Option<Tensor> = None;
        for (k, op) in ops.iter().enumerate() {
            if let Some(b) = op {
                let src = cur.as_ref().unwrap_or(self);
                cur = Some(src.mode_product(k, b)?);
            }
        }
        Ok(cur.unwrap_or_else(|| self.clone()))
    }

    /// Tucker product `X ×{B_1, ..., B_K}`. Fixed-identity factors are skipped.
    pub fn tucker_product(&self, factors: &KroneckerFactorSet) -> Result<Self> {
        if factors.len() != self.order() {
            return Err(Error::Shape(format!(
                "{} factors for a tensor of order {}",
                factors.len(),
                self.order()
            )));
        }
        let mut ops = Vec::with_capacity(factors.len());
        for (k, f) in factors.iter().enumerate() {
            if f.cols() != self.dims[k] {
                return Err(Error::Shape(format!(
                    "factor {k} has {} columns but mode size is {}",
                    f.cols(),
                    self.dims[k]
                )));
            }
            ops.push(if f.fixed_identity { None } else { Some(&f.matrix) });
        }
        self.multi_mode_product(&ops)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Keeps the listed indices (in the given order) along mode `k`.
    pub fn select(&self, k: usize, indices: &[usize]) -> Result<Self> {
        self.check_mode(k)?;
        let (left, mk, right) = mode_split(&self.dims, k);
        if let Some(&bad) = indices.iter().find(|&&i| i >= mk) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for mode {k}")));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty selection".into()));
        }
        let mut dims = self.dims.clone();
        dims[k] = indices.len();
        let mut data = Vec::with_capacity(left * indices.len() * right);
        for r in 0..right {
            for &i in indices {
                let start = left * (i + mk * r);
                data.extend_from_slice(&self.data[start..start + left]);
            }
        }
        Ok(Self::from_parts(dims, data))
    }

    /// Concatenates tensors along mode `k`; all other modes must agree.
    pub fn concat(parts: &[&Tensor], k: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        first.check_mode(k)?;
        for p in parts {
            let same = p.order() == first.order()
                && p.dims.iter().zip(&first.dims).enumerate().all(|(j, (a, b))| j == k || a == b);
            if !same {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?} along mode {k}",
                    p.dims, first.dims
                )));
            }
        }
        let (left, _, right) = mode_split(&first.dims, k);
        let total: usize = parts.iter().map(|p| p.dims[k]).sum();
        let mut dims = first.dims.clone();
        dims[k] = total;
        let mut data = Vec::with_capacity(left * total * right);
        for r in 0..right {
            for p in parts {
                let block = left * p.dims[k];
                data.extend_from_slice(&p.data[block * r..block * (r + 1)]);
            }
        }
        Ok(Self::from_parts(dims, data))
    }

    /// Same data viewed with different dimensions of equal total size.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.len() || dims.contains(&0) {
            return Err(Error::Shape(format!("cannot reshape {:?} to {dims:?}", self.dims)));
        }
        Ok(Self::from_parts(dims, self.data.clone()))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|v| v * c).collect())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.dims.clone(), data))
    }
}

/// Sum of squared entries.
pub fn frobenius_norm_sq(t: &Tensor) -> f64 {
    t.frobenius_norm_sq()
}

/// Standard Kronecker product `A ⊗ B`.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// One coefficient matrix `B_k` (`m_k × p_k`), optionally pinned to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    pub matrix: DMatrix<f64>,
    pub fixed_identity: bool,
}

impl FactorMatrix {
    pub fn free(matrix: DMatrix<f64>) -> Self {
        Self { matrix, fixed_identity: false }
    }

    pub fn identity(n: usize) -> Self {
        Self { matrix: DMatrix::identity(n, n), fixed_identity: true }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_free(&self) -> bool {
        !self.fixed_identity
    }
}

/// Ordered factors `B_1, ..., B_K`; the implied coefficient is `B_K ⊗ ... ⊗ B_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactorSet {
    factors: Vec<FactorMatrix>,
}

impl KroneckerFactorSet {
    pub fn new(factors: Vec<FactorMatrix>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("a factor set needs at least one mode".into()));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.fixed_identity && f.matrix != DMatrix::identity(f.rows(), f.rows()) {
                return Err(Error::InvalidArgument(format!(
                    "factor {k} is flagged fixed but is not a square identity"
                )));
            }
        }
        Ok(Self { factors })
    }

    /// All factors free.
    pub fn from_matrices(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(mats.into_iter().map(FactorMatrix::free).collect())
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, FactorMatrix> {
        self.factors.iter()
    }

    pub fn factors(&self) -> &[FactorMatrix] {
        &self.factors
    }

    pub fn get(&self, k: usize) -> &FactorMatrix {
        &self.factors[k]
    }

    pub fn matrix(&self, k: usize) -> &DMatrix<f64> {
        &self.factors[k].matrix
    }

    pub(crate) fn set_matrix(&mut self, k: usize, m: DMatrix<f64>) {
        self.factors[k].matrix = m;
    }

    pub fn free_modes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.factors[k].is_free()).collect()
    }

    /// Output sizes `m_k`.
    pub fn output_dims(&self) -> Vec<usize> {
        self.factors.iter().map(FactorMatrix::rows).collect()
    }

    /// Input sizes `p_k`.
    pub fn input_dims(&self) -> Vec<usize> {
        self.factors.iter().map(FactorMatrix::cols).collect()
    }

    /// Explicit `B_K ⊗ ... ⊗ B_1`. Only sensible for small problems.
    pub fn kronecker_chain(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::from_element(1, 1, 1.0);
        for f in &self.factors {
            acc = f.matrix.kronecker(&acc);
        }
        acc
    }
}

impl std::ops::Index<usize> for KroneckerFactorSet {
    type Output = FactorMatrix;
    fn index(&self, k: usize) -> &FactorMatrix {
        &self.factors[k]
    }
}

/// Tucker product as a free function.
pub fn tucker_product(x: &Tensor, factors: &KroneckerFactorSet) -> Result<Tensor> {
    x.tucker_product(factors)
}
