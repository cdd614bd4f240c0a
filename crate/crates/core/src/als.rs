//! Least-squares estimation of the multilinear tensor regression model
//! `Y = X ×{B_1, ..., B_K, I_n} + E` by block coordinate descent.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::solve_right_gram;
use crate::rng::stream_rng;
use crate::tensor::{FactorMatrix, KroneckerFactorSet, Tensor};

/// Entries of the outcome tensor that take no part in fitting or scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: Vec<usize>,
    excluded: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Vec<usize>, excluded: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != excluded.len() {
            return Err(Error::Shape(format!(
                "mask dims {dims:?} need {} flags, got {}",
                dims.iter().product::<usize>(),
                excluded.len()
            )));
        }
        Ok(Self { dims, excluded })
    }

    pub fn from_fn(dims: &[usize], mut excluded: impl FnMut(&[usize]) -> bool) -> Self {
        let t = Tensor::from_fn(dims, |i| if excluded(i) { 1.0 } else { 0.0 });
        Self { dims: dims.to_vec(), excluded: t.data().iter().map(|&v| v != 0.0).collect() }
    }

    /// Excludes entries whose indices along modes `a` and `b` coincide
    /// (self-relations in a square relational layout).
    pub fn diagonal(dims: &[usize], a: usize, b: usize) -> Self {
        Self::from_fn(dims, |i| i[a] == i[b])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn excluded(&self) -> &[bool] {
        &self.excluded
    }

    pub fn is_excluded(&self, offset: usize) -> bool {
        self.excluded[offset]
    }

    pub fn excluded_count(&self) -> usize {
        self.excluded.iter().filter(|&&e| e).count()
    }

    /// 1 for observed entries, 0 for excluded ones.
    pub fn weights(&self) -> Tensor {
        Tensor::from_parts(
            self.dims.clone(),
            self.excluded.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect(),
        )
    }

    pub fn select(&self, k: usize, indices: &[usize]) -> Result<Self> {
        let w = self.weights().select(k, indices)?;
        Ok(Self { dims: w.dims().to_vec(), excluded: w.data().iter().map(|&v| v == 0.0).collect() })
    }

    /// Zeroes the excluded entries of `t`.
    pub fn zero_excluded(&self, t: &mut Tensor) {
        for (v, &e) in t.data_mut().iter_mut().zip(&self.excluded) {
            if e {
                *v = 0.0;
            }
        }
    }
}

/// Stacked predictor and outcome tensors; the last mode indexes replications.
#[derive(Debug, Clone)]
pub struct RegressionDataset {
    x: Tensor,
    y: Tensor,
    mask: Option<Mask>,
}

impl RegressionDataset {
    pub fn new(x: Tensor, y: Tensor, mask: Option<Mask>) -> Result<Self> {
        if x.order() != y.order() || x.order() < 2 {
            return Err(Error::Shape(format!(
                "X {:?} and Y {:?} must both have K+1 >= 2 modes",
                x.dims(),
                y.dims()
            )));
        }
        let n = *y.dims().last().unwrap();
        if *x.dims().last().unwrap() != n {
            return Err(Error::Shape(format!(
                "replication lengths differ: X {:?}, Y {:?}",
                x.dims(),
                y.dims()
            )));
        }
        if let Some(m) = &mask {
            if m.dims() != y.dims() {
                return Err(Error::Shape(format!(
                    "mask {:?} does not match Y {:?}",
                    m.dims(),
                    y.dims()
                )));
            }
        }
        Ok(Self { x, y, mask })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    /// Number of non-replication modes.
    pub fn modes(&self) -> usize {
        self.y.order() - 1
    }

    pub fn replication_mode(&self) -> usize {
        self.y.order() - 1
    }

    pub fn n(&self) -> usize {
        *self.y.dims().last().unwrap()
    }

    /// Outcome sizes `m_1, ..., m_K`.
    pub fn output_dims(&self) -> &[usize] {
        &self.y.dims()[..self.modes()]
    }

    /// Predictor sizes `p_1, ..., p_K`.
    pub fn input_dims(&self) -> &[usize] {
        &self.x.dims()[..self.modes()]
    }

    pub fn select_replications(&self, indices: &[usize]) -> Result<Self> {
        let r = self.replication_mode();
        Ok(Self {
            x: self.x.select(r, indices)?,
            y: self.y.select(r, indices)?,
            mask: self.mask.as_ref().map(|m| m.select(r, indices)).transpose()?,
        })
    }

    pub(crate) fn check_factors(&self, f: &KroneckerFactorSet) -> Result<()> {
        if f.len() != self.modes() {
            return Err(Error::Shape(format!(
                "{} factors for a {}-mode model",
                f.len(),
                self.modes()
            )));
        }
        for k in 0..f.len() {
            if f[k].rows() != self.output_dims()[k] || f[k].cols() != self.input_dims()[k] {
                return Err(Error::Shape(format!(
                    "factor {k} is {}x{}, expected {}x{}",
                    f[k].rows(),
                    f[k].cols(),
                    self.output_dims()[k],
                    self.input_dims()[k]
                )));
            }
        }
        Ok(())
    }
}

/// Sample cross moments `S_xx = Σ x_r x_rᵀ / n` and `S_xy = Σ x_r y_rᵀ / n`.
#[derive(Debug, Clone)]
pub struct CrossMomentPair {
    pub s_xx: DMatrix<f64>,
    pub s_xy: DMatrix<f64>,
}

impl CrossMomentPair {
    pub fn from_dataset(data: &RegressionDataset) -> Self {
        let n = data.n();
        let p = data.x().len() / n;
        let m = data.y().len() / n;
        let x = DMatrix::from_column_slice(p, n, data.x().data());
        let y = DMatrix::from_column_slice(m, n, data.y().data());
        let s_xx = &x * x.transpose() / n as f64;
        let s_xy = &x * y.transpose() / n as f64;
        Self { s_xx, s_xy }
    }

    /// `tr((ΘᵀΘ) S_xx) - 2 tr(Θ S_xy)` with `Θ = B_K ⊗ ... ⊗ B_1`; equals
    /// the mean squared residual minus the constant `Σ‖y_r‖²/n`.
    pub fn objective(&self, factors: &KroneckerFactorSet) -> f64 {
        let theta = factors.kronecker_chain();
        let gram = theta.transpose() * &theta;
        gram.component_mul(&self.s_xx).sum() - 2.0 * (theta * &self.s_xy).trace()
    }
}

#[derive(Debug, Clone)]
pub struct AlsOptions {
    /// Stop once the relative decrease of the residual sum of squares drops below this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Gram matrices get `ridge * trace / dim` added to their diagonal.
    pub ridge: f64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 500, ridge: 1e-8 }
    }
}

impl AlsOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidArgument("max_sweeps must be at least 1".into()));
        }
        if self.ridge < 0.0 {
            return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Starting values for the factors.
#[derive(Debug, Clone)]
pub enum Init {
    /// Standard normal entries scaled to unit Frobenius norm.
    Random { seed: u64 },
    /// Rectangular identities.
    Identity,
    Factors(KroneckerFactorSet),
}

/// Builds starting factors; modes listed in `fixed_modes` are pinned to the
/// identity (they must be square).
pub fn initial_factors(
    data: &RegressionDataset,
    init: &Init,
    fixed_modes: &[usize],
) -> Result<KroneckerFactorSet> {
    let m = data.output_dims();
    let p = data.input_dims();
    let f = match init {
        Init::Factors(f) => f.clone(),
        Init::Random { .. } | Init::Identity => {
            let mut rng = match init {
                Init::Random { seed } => Some(stream_rng(*seed, 0)),
                _ => None,
            };
            let mut factors = Vec::with_capacity(m.len());
            for k in 0..m.len() {
                if fixed_modes.contains(&k) {
                    if m[k] != p[k] {
                        return Err(Error::InvalidArgument(format!(
                            "mode {k} cannot be fixed: it is {}x{}",
                            m[k], p[k]
                        )));
                    }
                    factors.push(FactorMatrix::identity(m[k]));
                    continue;
                }
                let mat = match rng.as_mut() {
                    Some(rng) => {
                        let a = DMatrix::from_fn(m[k], p[k], |_, _| rng.sample::<f64, _>(StandardNormal));
                        let norm = a.norm();
                        a / norm
                    }
                    None => DMatrix::identity(m[k], p[k]),
                };
                factors.push(FactorMatrix::free(mat));
            }
            KroneckerFactorSet::new(factors)?
        }
    };
    data.check_factors(&f)?;
    Ok(f)
}

/// Predicts `X ×{B_1, ..., B_K}`; a trailing replication mode of `x` is left untouched.
pub fn predict(factors: &KroneckerFactorSet, x: &Tensor) -> Result<Tensor> {
    let k = factors.len();
    if x.order() == k {
        return x.tucker_product(factors);
    }
    if x.order() != k + 1 {
        return Err(Error::Shape(format!(
            "{} factors cannot act on a tensor of order {}",
            k,
            x.order()
        )));
    }
    let mut ops: Vec<Option<&DMatrix<f64>>> = Vec::with_capacity(k + 1);
    for (j, f) in factors.iter().enumerate() {
        if f.cols() != x.dims()[j] {
            return Err(Error::Shape(format!(
                "factor {j} has {} columns but mode size is {}",
                f.cols(),
                x.dims()[j]
            )));
        }
        ops.push(if f.fixed_identity { None } else { Some(&f.matrix) });
    }
    ops.push(None);
    x.multi_mode_product(&ops)
}

/// `Y - predict(F, X)` with excluded entries set to zero.
pub fn residual_tensor(data: &RegressionDataset, factors: &KroneckerFactorSet) -> Result<Tensor> {
    let mut r = data.y().sub(&predict(factors, data.x())?)?;
    if let Some(m) = data.mask() {
        m.zero_excluded(&mut r);
    }
    Ok(r)
}

pub fn residual_sum_of_squares(data: &RegressionDataset, factors: &KroneckerFactorSet) -> Result<f64> {
    Ok(residual_tensor(data, factors)?.frobenius_norm_sq())
}

/// Applies `B_j` on every mode except `k` (and the replication mode).
pub(crate) fn partial_design(
    x: &Tensor,
    factors: &KroneckerFactorSet,
    k: usize,
) -> Result<Tensor> {
    let mut ops: Vec<Option<&DMatrix<f64>>> = factors
        .iter()
        .enumerate()
        .map(|(j, f)| if j == k || f.fixed_identity { None } else { Some(&f.matrix) })
        .collect();
    ops.push(None);
    x.multi_mode_product(&ops)
}

/// Least-squares solution of `Y_(k) ≈ B X̃_(k)`, honoring observation weights
/// (0/1) row by row when present.
pub(crate) fn solve_mode(
    yk: &DMatrix<f64>,
    xk: &DMatrix<f64>,
    weights: Option<&DMatrix<f64>>,
    ridge: f64,
    mode: usize,
) -> Result<DMatrix<f64>> {
    let gram = xk * xk.transpose();
    let cross = yk * xk.transpose();
    let Some(w) = weights else {
        return solve_right_gram(&cross, &gram, ridge, mode);
    };
    let cols = xk.ncols();
    let p = xk.nrows();
    let mut out = DMatrix::zeros(yk.nrows(), p);
    for i in 0..yk.nrows() {
        let excluded: Vec<usize> = (0..cols).filter(|&c| w[(i, c)] == 0.0).collect();
        let (g, c) = if excluded.is_empty() {
            (gram.clone(), cross.rows(i, 1).into_owned())
        } else if 2 * excluded.len() <= cols {
            let mut g = gram.clone();
            let mut c = cross.rows(i, 1).into_owned();
            for &col in &excluded {
                let xc = xk.column(col);
                g.ger(-1.0, &xc, &xc, 1.0);
                c -= xc.transpose() * yk[(i, col)];
            }
            (g, c)
        } else {
            let mut g = DMatrix::zeros(p, p);
            let mut c = DMatrix::zeros(1, p);
            for col in (0..cols).filter(|&col| w[(i, col)] != 0.0) {
                let xc = xk.column(col);
                g.ger(1.0, &xc, &xc, 1.0);
                c += xc.transpose() * yk[(i, col)];
            }
            (g, c)
        };
        let row = solve_right_gram(&c, &g, ridge, mode)?;
        out.set_row(i, &row.row(0));
    }
    Ok(out)
}

/// Exact least-squares update of factor `k` with all other factors held fixed:
/// `B_k = Y_(k) X̃_(k)ᵀ (X̃_(k) X̃_(k)ᵀ)^{-1}` where `X̃ = X ×{..., I_{p_k}, ...}`.
pub fn conditional_minimizer(
    data: &RegressionDataset,
    factors: &KroneckerFactorSet,
    k: usize,
    ridge: f64,
) -> Result<FactorMatrix> {
    data.check_factors(factors)?;
    if k >= data.modes() {
        return Err(Error::ModeOutOfRange { mode: k, order: data.modes() });
    }
    if factors[k].fixed_identity {
        return Err(Error::InvalidArgument(format!("mode {k} is fixed to the identity")));
    }
    let xt = partial_design(data.x(), factors, k)?;
    let weights = data.mask().map(|m| m.weights().matricize(k)).transpose()?;
    let b = solve_mode(&data.y().matricize(k)?, &xt.matricize(k)?, weights.as_ref(), ridge, k)?;
    Ok(FactorMatrix::free(b))
}

/// Rescales the free factors to a common Frobenius norm without changing
/// their Kronecker product.
pub fn normalize_scale(factors: &KroneckerFactorSet) -> Result<KroneckerFactorSet> {
    let free = factors.free_modes();
    if free.is_empty() {
        return Ok(factors.clone());
    }
    let mut log_norms = Vec::with_capacity(free.len());
    for &k in &free {
        let n = factors.matrix(k).norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroFactor { mode: k });
        }
        log_norms.push(n.ln());
    }
    let log_g = log_norms.iter().sum::<f64>() / free.len() as f64;
    let mut out = factors.clone();
    for (&k, ln) in free.iter().zip(&log_norms) {
        let c = (log_g - ln).exp();
        out.set_matrix(k, factors.matrix(k) * c);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub factors: KroneckerFactorSet,
    /// Residual sum of squares at the start and after every accepted sweep.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

impl FitReport {
    pub fn final_rss(&self) -> f64 {
        *self.objective_trace.last().unwrap()
    }
}

/// Cyclic block coordinate descent over the free modes.
///
/// A sweep that fails to lower the residual sum of squares (possible only
/// through rounding at the optimum) is discarded and ends the run, so the
/// returned trace is nonincreasing.
pub fn fit_als(data: &RegressionDataset, init: &Init, opts: &AlsOptions) -> Result<FitReport> {
    fit_als_with_fixed(data, init, &[], opts)
}

pub fn fit_als_with_fixed(
    data: &RegressionDataset,
    init: &Init,
    fixed_modes: &[usize],
    opts: &AlsOptions,
) -> Result<FitReport> {
    opts.validate()?;
    let mut factors = initial_factors(data, init, fixed_modes)?;
    let free = factors.free_modes();
    if free.is_empty() {
        return Err(Error::InvalidArgument("no free mode to estimate".into()));
    }
    let mut tss = data.y().clone();
    if let Some(m) = data.mask() {
        m.zero_excluded(&mut tss);
    }
    let floor = f64::EPSILON * f64::EPSILON * tss.frobenius_norm_sq();

    let mut prev = residual_sum_of_squares(data, &factors)?;
    if !prev.is_finite() {
        return Err(Error::Divergence { sweep: 0 });
    }
    let mut trace = vec![prev];
    let mut converged = false;
    let mut sweeps = 0;
    while !converged && sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut next = factors.clone();
        for &k in &free {
            let b = conditional_minimizer(data, &next, k, opts.ridge)?;
            next.set_matrix(k, b.matrix);
        }
        let rss = residual_sum_of_squares(data, &next)?;
        if !rss.is_finite() {
            return Err(Error::Divergence { sweep: sweeps });
        }
        if rss > prev {
            converged = true;
            break;
        }
        factors = next;
        trace.push(rss);
        converged = prev - rss <= opts.tol * prev || rss <= floor;
        prev = rss;
    }
    let factors = match normalize_scale(&factors) {
        Ok(f) => f,
        Err(Error::ZeroFactor { mode }) => {
            warn!("factor {mode} is zero; returning unnormalized factors");
            factors
        }
        Err(e) => return Err(e),
    };
    Ok(FitReport { factors, objective_trace: trace, sweeps, converged })
}
