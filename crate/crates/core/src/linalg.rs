//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(s));
    let n = s.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (j, &i) in order.iter().enumerate() {
        vectors.set_column(j, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

fn spectral_map(s: &DMatrix<f64>, what: &str, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::Shape(format!("{what}: matrix is {}x{}", s.nrows(), s.ncols())));
    }
    let eig = SymmetricEigen::new(symmetrize(s));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what}: eigenvalue {bad:e}")));
    }
    let d = eig.eigenvalues.map(f);
    let q = &eig.eigenvectors;
    Ok(symmetrize(&(q * DMatrix::from_diagonal(&d) * q.transpose())))
}

/// The symmetric inverse square root `S^{-1/2}` of an SPD matrix.
pub fn inv_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(s, "inverse square root", |v| 1.0 / v.sqrt())
}

/// The symmetric square root of an SPD matrix.
pub fn sqrt_spd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(s, "square root", f64::sqrt)
}

/// Symmetric square root of a positive semidefinite matrix; tiny negative
/// eigenvalues from rounding are clamped to zero.
pub fn sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(s));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -tol || !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("square root: eigenvalue {bad:e}")));
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&d) * q.transpose())
}

pub fn cholesky(s: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !s.is_square() {
        return Err(Error::Shape(format!("{what}: matrix is {}x{}", s.nrows(), s.ncols())));
    }
    Cholesky::new(symmetrize(s)).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn spd_inverse(s: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(s, what)?.inverse()))
}

/// Ridge added to a Gram matrix: `scale * trace / dim`, or `scale` itself
/// when the Gram matrix is zero.
pub fn ridge_for(gram: &DMatrix<f64>, scale: f64) -> f64 {
    if scale <= 0.0 {
        return 0.0;
    }
    let tr = gram.trace();
    if tr > 0.0 {
        scale * tr / gram.nrows() as f64
    } else {
        scale
    }
}

/// Solves `B G = C` for `B` (i.e. `B = C G^{-1}`) with `G` symmetric PSD,
/// after adding the ridge. Failure is reported against `mode`.
pub fn solve_right_gram(
    cross: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    ridge_scale: f64,
    mode: usize,
) -> Result<DMatrix<f64>> {
    let mut g = symmetrize(gram);
    let eps = ridge_for(&g, ridge_scale);
    for i in 0..g.nrows() {
        g[(i, i)] += eps;
    }
    let chol = Cholesky::new(g).ok_or(Error::Singular { mode })?;
    let bt = chol.solve(&cross.transpose());
    if bt.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular { mode });
    }
    Ok(bt.transpose())
}
