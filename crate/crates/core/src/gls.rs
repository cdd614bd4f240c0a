//! Array normal errors with separable covariance `τ² Σ_K ⊗ ... ⊗ Σ_1`:
//! generalized least-squares factor updates, covariance maximum likelihood
//! and residual diagnostics.

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::als::{initial_factors, normalize_scale, predict, solve_mode, AlsOptions, Init, RegressionDataset};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, inv_sqrt, ridge_for, sqrt_psd, sym_eigen_desc, symmetrize};
use crate::rng::stream_rng;
use crate::tensor::{FactorMatrix, KroneckerFactorSet, Tensor};

/// Mode covariances `Σ_k` for the non-replication modes and the overall scale `τ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableCovariance {
    pub sigmas: Vec<DMatrix<f64>>,
    pub tau2: f64,
}

impl SeparableCovariance {
    pub fn new(sigmas: Vec<DMatrix<f64>>, tau2: f64) -> Result<Self> {
        if !(tau2 > 0.0) || !tau2.is_finite() {
            return Err(Error::InvalidArgument(format!("tau2 must be positive, got {tau2}")));
        }
        for (k, s) in sigmas.iter().enumerate() {
            if !s.is_square() || (s - s.transpose()).amax() > 1e-10 * s.amax().max(1.0) {
                return Err(Error::NotPositiveDefinite(format!("sigma {k} is not symmetric")));
            }
            cholesky(s, &format!("sigma {k}"))?;
        }
        Ok(Self { sigmas, tau2 })
    }

    pub fn identity(dims: &[usize]) -> Self {
        Self { sigmas: dims.iter().map(|&m| DMatrix::identity(m, m)).collect(), tau2: 1.0 }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.sigmas.iter().map(|s| s.nrows()).collect()
    }

    pub fn inv_sqrts(&self) -> Result<Vec<DMatrix<f64>>> {
        self.sigmas.iter().map(inv_sqrt).collect()
    }

    /// Rescales each `Σ_k` to trace `m_k`, moving the scale into `τ²`.
    pub fn apply_trace_gauge(&mut self) {
        for s in &mut self.sigmas {
            let c = s.trace() / s.nrows() as f64;
            if c > 0.0 && c.is_finite() {
                *s /= c;
                self.tau2 *= c;
            }
        }
    }

    /// `τ² Σ_K ⊗ ... ⊗ Σ_1`; only sensible for small arrays.
    pub fn vectorized(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::from_element(1, 1, self.tau2);
        for s in &self.sigmas {
            acc = s.kronecker(&acc);
        }
        acc
    }
}

/// Multiplies mode `j` by `mats[j]` for every non-replication mode except `skip`.
pub(crate) fn along_modes(t: &Tensor, mats: &[DMatrix<f64>], skip: Option<usize>) -> Result<Tensor> {
    let mut ops: Vec<Option<&DMatrix<f64>>> =
        mats.iter().enumerate().map(|(j, m)| if Some(j) == skip { None } else { Some(m) }).collect();
    ops.resize(t.order(), None);
    t.multi_mode_product(&ops)
}

/// Replaces excluded outcome entries by the current fitted values.
pub(crate) fn impute(data: &RegressionDataset, factors: &KroneckerFactorSet) -> Result<Tensor> {
    let Some(mask) = data.mask() else {
        return Ok(data.y().clone());
    };
    let fit = predict(factors, data.x())?;
    let mut y = data.y().clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        if mask.is_excluded(i) {
            *v = fit.data()[i];
        }
    }
    Ok(y)
}

fn check_cov(data: &RegressionDataset, cov: &SeparableCovariance) -> Result<()> {
    if cov.dims() != data.output_dims() {
        return Err(Error::Shape(format!(
            "covariance dims {:?} do not match outcome dims {:?}",
            cov.dims(),
            data.output_dims()
        )));
    }
    Ok(())
}

/// Conditional maximum-likelihood update of `B_k`: least squares after
/// whitening every other mode by `Σ_j^{-1/2}`.
pub fn gls_conditional_update(
    data: &RegressionDataset,
    factors: &KroneckerFactorSet,
    cov: &SeparableCovariance,
    k: usize,
    ridge: f64,
) -> Result<FactorMatrix> {
    data.check_factors(factors)?;
    check_cov(data, cov)?;
    if k >= data.modes() {
        return Err(Error::ModeOutOfRange { mode: k, order: data.modes() });
    }
    if factors[k].fixed_identity {
        return Err(Error::InvalidArgument(format!("mode {k} is fixed to the identity")));
    }
    let w = cov.inv_sqrts()?;
    gls_update_with(data, factors, &w, k, ridge)
}

fn gls_update_with(
    data: &RegressionDataset,
    factors: &KroneckerFactorSet,
    w: &[DMatrix<f64>],
    k: usize,
    ridge: f64,
) -> Result<FactorMatrix> {
    let y = impute(data, factors)?;
    let yt = along_modes(&y, w, Some(k))?;
    let wb: Vec<DMatrix<f64>> = factors
        .iter()
        .zip(w)
        .map(|(f, wj)| if f.fixed_identity { wj.clone() } else { wj * &f.matrix })
        .collect();
    let xt = along_modes(data.x(), &wb, Some(k))?;
    let b = solve_mode(&yt.matricize(k)?, &xt.matricize(k)?, None, ridge, k)?;
    Ok(FactorMatrix::free(b))
}

/// Conditional MLE of `Σ_k` given the other mode covariances and `τ²`:
/// `Ẽ_(k) Ẽ_(k)ᵀ / m_{-k}` with `Ẽ` the residual whitened along the other
/// modes and divided by `τ`. A singular result gets a small ridge.
pub fn sigma_mle_update(residual: &Tensor, cov: &SeparableCovariance, k: usize) -> Result<DMatrix<f64>> {
    if k >= cov.sigmas.len() {
        return Err(Error::ModeOutOfRange { mode: k, order: cov.sigmas.len() });
    }
    let w = cov.inv_sqrts()?;
    sigma_update_with(residual, &w, cov.tau2, k)
}

fn sigma_update_with(residual: &Tensor, w: &[DMatrix<f64>], tau2: f64, k: usize) -> Result<DMatrix<f64>> {
    if residual.order() < w.len() || residual.dims()[..w.len()] != w.iter().map(|m| m.nrows()).collect::<Vec<_>>()[..] {
        return Err(Error::Shape(format!("residual {:?} does not match covariance", residual.dims())));
    }
    let e = along_modes(residual, w, Some(k))?.matricize(k)?;
    let m_rest = (residual.len() / residual.dims()[k]) as f64;
    let mut s = symmetrize(&(&e * e.transpose())) / (m_rest * tau2);
    if cholesky(&s, "sigma").is_err() {
        let eps = ridge_for(&s, 1e-8);
        warn!("residual covariance for mode {k} is singular; adding ridge {eps:e}");
        for i in 0..s.nrows() {
            s[(i, i)] += eps;
        }
    }
    Ok(s)
}

fn whitened_ssq(residual: &Tensor, w: &[DMatrix<f64>]) -> Result<f64> {
    Ok(along_modes(residual, w, None)?.frobenius_norm_sq())
}

/// Maximum-likelihood `τ²`: mean squared whitened residual.
pub fn tau2_mle(residual: &Tensor, cov: &SeparableCovariance) -> Result<f64> {
    Ok(whitened_ssq(residual, &cov.inv_sqrts()?)? / residual.len() as f64)
}

/// Negative log-likelihood of a residual array under the array normal model.
pub fn negative_log_likelihood(residual: &Tensor, cov: &SeparableCovariance) -> Result<f64> {
    let w = cov.inv_sqrts()?;
    let m = residual.len() as f64;
    let mut logdet = 0.0;
    for (k, s) in cov.sigmas.iter().enumerate() {
        let ch = cholesky(s, &format!("sigma {k}"))?;
        let ld: f64 = ch.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        logdet += m / s.nrows() as f64 * ld;
    }
    let q = whitened_ssq(residual, &w)?;
    Ok(0.5 * (m * (2.0 * PI * cov.tau2).ln() + logdet + q / cov.tau2))
}

#[derive(Debug, Clone)]
pub struct GlsOptions {
    pub als: AlsOptions,
    /// When false the mode covariances stay at their initial values and only `τ²` is re-estimated.
    pub estimate_covariance: bool,
}

impl Default for GlsOptions {
    fn default() -> Self {
        Self { als: AlsOptions::default(), estimate_covariance: true }
    }
}

#[derive(Debug, Clone)]
pub struct GlsFit {
    pub factors: KroneckerFactorSet,
    pub covariance: SeparableCovariance,
    /// Negative log-likelihood at the start and after every sweep.
    pub nll_trace: Vec<f64>,
    /// Negative log-likelihood after every individual block update.
    pub step_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Block coordinate ascent on the array normal likelihood: factor updates for
/// the free modes, covariance updates for every mode, then `τ²`. Mode
/// covariances are kept at trace `m_k`.
pub fn fit_gls(
    data: &RegressionDataset,
    init: &Init,
    init_cov: Option<SeparableCovariance>,
    fixed_modes: &[usize],
    gls_opts: &GlsOptions,
) -> Result<GlsFit> {
    let opts = &gls_opts.als;
    opts.validate()?;
    let mut factors = initial_factors(data, init, fixed_modes)?;
    let free = factors.free_modes();
    if free.is_empty() {
        return Err(Error::InvalidArgument("no free mode to estimate".into()));
    }
    let residual = |f: &KroneckerFactorSet| -> Result<Tensor> {
        let y = impute(data, f)?;
        y.sub(&predict(f, data.x())?)
    };
    let mut cov = match init_cov {
        Some(c) => {
            check_cov(data, &c)?;
            c
        }
        None => {
            let r = residual(&factors)?;
            let tau2 = r.frobenius_norm_sq() / r.len() as f64;
            let mut c = SeparableCovariance::identity(data.output_dims());
            c.tau2 = if tau2 > 0.0 { tau2 } else { 1.0 };
            c
        }
    };
    cov.apply_trace_gauge();

    let mut prev = negative_log_likelihood(&residual(&factors)?, &cov)?;
    if !prev.is_finite() {
        return Err(Error::Divergence { sweep: 0 });
    }
    let mut nll_trace = vec![prev];
    let mut step_trace = vec![prev];
    let mut converged = false;
    let mut sweeps = 0;
    while !converged && sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut w = cov.inv_sqrts()?;
        for &k in &free {
            let b = gls_update_with(data, &factors, &w, k, opts.ridge)?;
            factors.set_matrix(k, b.matrix);
            step_trace.push(negative_log_likelihood(&residual(&factors)?, &cov)?);
        }
        let r = residual(&factors)?;
        for k in (0..cov.sigmas.len()).filter(|_| gls_opts.estimate_covariance) {
            let s = sigma_update_with(&r, &w, cov.tau2, k)?;
            cov.sigmas[k] = s;
            cov.apply_trace_gauge();
            w = cov.inv_sqrts()?;
            step_trace.push(negative_log_likelihood(&r, &cov)?);
        }
        let t2 = whitened_ssq(&r, &w)? / r.len() as f64;
        if !(t2 > 0.0) {
            warn!("residual vanished; keeping tau2 at {:e}", cov.tau2);
        } else {
            cov.tau2 = t2;
        }
        let nll = negative_log_likelihood(&r, &cov)?;
        if !nll.is_finite() {
            return Err(Error::Divergence { sweep: sweeps });
        }
        step_trace.push(nll);
        nll_trace.push(nll);
        converged = prev - nll <= opts.tol * prev.abs().max(1.0);
        prev = nll;
    }
    let factors = match normalize_scale(&factors) {
        Ok(f) => f,
        Err(Error::ZeroFactor { mode }) => {
            warn!("factor {mode} is zero; returning unnormalized factors");
            factors
        }
        Err(e) => return Err(e),
    };
    Ok(GlsFit { factors, covariance: cov, nll_trace, step_trace, sweeps, converged })
}

/// Draws `τ (Z ×{Σ_1^{1/2}, ..., Σ_K^{1/2}})` with `Z` standard normal. A
/// trailing extra mode in `dims` is treated as independent replications.
pub fn sample_array_normal<R: Rng + ?Sized>(
    dims: &[usize],
    cov: &SeparableCovariance,
    rng: &mut R,
) -> Result<Tensor> {
    let k = cov.sigmas.len();
    if !(dims.len() == k || dims.len() == k + 1) || dims[..k] != cov.dims()[..] {
        return Err(Error::Shape(format!(
            "dims {dims:?} do not conform to covariance {:?}",
            cov.dims()
        )));
    }
    let roots: Vec<DMatrix<f64>> = cov.sigmas.iter().map(sqrt_psd).collect::<Result<_>>()?;
    let z = Tensor::from_fn(dims, |_| rng.sample(StandardNormal));
    Ok(along_modes(&z, &roots, None)?.scale(cov.tau2.sqrt()))
}

pub fn sample_array_normal_seeded(dims: &[usize], cov: &SeparableCovariance, seed: u64) -> Result<Tensor> {
    sample_array_normal(dims, cov, &mut stream_rng(seed, 0))
}

/// Correlation among the rows of `R_(k)` with its eigen-decomposition.
#[derive(Debug, Clone)]
pub struct ModeCorrelationDiagnostic {
    pub mode: usize,
    pub correlation: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

pub fn mode_residual_correlation(residual: &Tensor, k: usize) -> Result<ModeCorrelationDiagnostic> {
    let mut r = residual.matricize(k)?;
    let (m, cols) = r.shape();
    let mut sd = vec![0.0; m];
    for i in 0..m {
        let mean = r.row(i).mean();
        r.row_mut(i).add_scalar_mut(-mean);
        sd[i] = r.row(i).norm();
    }
    let mut corr = DMatrix::identity(m, m);
    for i in 0..m {
        if sd[i] == 0.0 || cols < 2 {
            warn!("row {i} of mode {k} has zero variance; its correlations are set to zero");
            continue;
        }
        for j in 0..i {
            if sd[j] == 0.0 {
                continue;
            }
            let c = (r.row(i).dot(&r.row(j)) / (sd[i] * sd[j])).clamp(-1.0, 1.0);
            corr[(i, j)] = c;
            corr[(j, i)] = c;
        }
    }
    let (eigenvalues, eigenvectors) = sym_eigen_desc(&corr);
    Ok(ModeCorrelationDiagnostic { mode: k, correlation: corr, eigenvalues, eigenvectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::als::{conditional_minimizer, fit_als};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn ar1(m: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| rho.powi((i as i32 - j as i32).abs()))
    }

    fn dataset(seed: u64, cov: &SeparableCovariance, n: usize) -> (RegressionDataset, KroneckerFactorSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = cov.dims();
        let f = KroneckerFactorSet::from_matrices(
            dims.iter().map(|&m| DMatrix::identity(m, m) + mat(m, m, &mut rng) * 0.3).collect(),
        )
        .unwrap();
        let mut xd = dims.clone();
        xd.push(n);
        let x = Tensor::from_fn(&xd, |_| rng.sample(StandardNormal));
        let e = sample_array_normal(&xd, cov, &mut rng).unwrap();
        let y = predict(&f, &x).unwrap().add(&e).unwrap();
        (RegressionDataset::new(x, y, None).unwrap(), f)
    }

    #[test]
    fn gls_update_reduces_to_ols() {
        let cov = SeparableCovariance::identity(&[3, 4]);
        let (data, truth) = dataset(1, &cov, 20);
        for k in 0..2 {
            let a = gls_conditional_update(&data, &truth, &cov, k, 0.0).unwrap();
            let b = conditional_minimizer(&data, &truth, k, 0.0).unwrap();
            assert!((a.matrix - b.matrix).amax() < 1e-12);
        }
    }

    #[test]
    fn gls_update_invariant_to_covariance_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s2 = {
            let a = mat(4, 4, &mut rng);
            &a * a.transpose() + DMatrix::identity(4, 4)
        };
        let cov = SeparableCovariance::new(vec![ar1(3, 0.5), s2.clone()], 1.0).unwrap();
        let (data, truth) = dataset(3, &cov, 15);
        let scaled = SeparableCovariance::new(vec![ar1(3, 0.5), s2 * 7.0], 3.0).unwrap();
        let a = gls_conditional_update(&data, &truth, &cov, 0, 0.0).unwrap();
        let b = gls_conditional_update(&data, &truth, &scaled, 0, 0.0).unwrap();
        assert!((a.matrix - b.matrix).amax() < 1e-10);
    }

    #[test]
    fn gls_update_noiseless_recovery() {
        let cov = SeparableCovariance::new(vec![ar1(3, 0.7), ar1(3, -0.4)], 1e-30).unwrap();
        let (data, truth) = dataset(4, &cov, 10);
        let b = gls_conditional_update(&data, &truth, &cov, 1, 0.0).unwrap();
        assert!((b.matrix - truth.matrix(1)).amax() < 1e-8);
    }

    #[test]
    fn sigma_update_examples() {
        // Rows of Ẽ_(0) orthogonal with squared norm m_{-0}.
        let e = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let cov = SeparableCovariance::identity(&[2, 2]);
        let s = sigma_mle_update(&e, &cov, 0).unwrap();
        assert!((s - DMatrix::identity(2, 2)).amax() < 1e-14);

        let z = sigma_mle_update(&Tensor::zeros(&[3, 2, 4]), &SeparableCovariance::identity(&[3, 2]), 0)
            .unwrap();
        assert!((z - DMatrix::identity(3, 3) * 1e-8).amax() < 1e-20);
    }

    #[test]
    fn sigma_update_recovers_planted() {
        let truth = SeparableCovariance::new(vec![ar1(4, 0.6), ar1(3, 0.3)], 1.0).unwrap();
        let e = sample_array_normal_seeded(&[4, 3, 4000], &truth, 5).unwrap();
        let s = sigma_mle_update(&e, &SeparableCovariance::new(vec![ar1(4, 0.6), ar1(3, 0.3)], 1.0).unwrap(), 0)
            .unwrap();
        assert!((&s - &truth.sigmas[0]).norm() < 0.1 * truth.sigmas[0].norm());
    }

    #[test]
    fn sampler_moments() {
        let cov = SeparableCovariance::identity(&[1]);
        let z = sample_array_normal_seeded(&[1, 1_000_000], &cov, 1).unwrap();
        let var = z.frobenius_norm_sq() / 1e6;
        assert!((var - 1.0).abs() < 0.05);

        let mut zero = SeparableCovariance::identity(&[2, 2]);
        zero.tau2 = 0.0;
        assert_eq!(sample_array_normal_seeded(&[2, 2], &zero, 1).unwrap(), Tensor::zeros(&[2, 2]));

        let s = ar1(3, 0.8);
        let cov = SeparableCovariance::new(vec![s.clone()], 1.0).unwrap();
        let z = sample_array_normal_seeded(&[3, 100_000], &cov, 2).unwrap();
        let zm = DMatrix::from_column_slice(3, 100_000, z.data());
        let emp = &zm * zm.transpose() / 1e5;
        for i in 0..3 {
            for j in 0..3 {
                assert!((emp[(i, j)] - s[(i, j)]).abs() < 0.05 * s[(i, j)].abs().max(0.5));
            }
        }
    }

    #[test]
    fn kronecker_covariance_of_samples() {
        let cov = SeparableCovariance::new(
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]), DMatrix::from_row_slice(2, 2, &[1.5, -0.6, -0.6, 1.0])],
            1.3,
        )
        .unwrap();
        let z = sample_array_normal_seeded(&[2, 2, 100_000], &cov, 3).unwrap();
        let zm = DMatrix::from_column_slice(4, 100_000, z.data());
        let emp = &zm * zm.transpose() / 1e5;
        let want = cov.vectorized();
        for (e, w) in emp.iter().zip(want.iter()) {
            assert!((e - w).abs() < 0.05 * w.abs().max(0.5), "{e} vs {w}");
        }
    }

    #[test]
    fn fit_gls_identity_matches_ols() {
        let cov = SeparableCovariance::identity(&[3, 3]);
        let (data, _) = dataset(6, &cov, 200);
        let opts = AlsOptions { tol: 1e-14, ridge: 0.0, ..Default::default() };
        let ols = fit_als(&data, &Init::Identity, &opts).unwrap();
        let pinned = GlsOptions { als: opts.clone(), estimate_covariance: false };
        let fit = fit_gls(&data, &Init::Identity, None, &[], &pinned).unwrap();
        for k in 0..2 {
            assert!((fit.factors.matrix(k) - ols.factors.matrix(k)).amax() < 1e-6);
        }

        let free = fit_gls(&data, &Init::Identity, None, &[], &GlsOptions::default()).unwrap();
        assert!((free.factors.kronecker_chain() - ols.factors.kronecker_chain()).amax() < 0.05);
    }

    #[test]
    fn fit_gls_likelihood_monotone() {
        let cov = SeparableCovariance::new(vec![ar1(4, 0.8), ar1(3, 0.2)], 0.5).unwrap();
        let (data, _) = dataset(7, &cov, 60);
        let fit = fit_gls(&data, &Init::Random { seed: 3 }, None, &[], &GlsOptions::default()).unwrap();
        for w in fit.step_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        for s in &fit.covariance.sigmas {
            assert!((s.trace() - s.nrows() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn correlation_diagnostic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Tensor::from_fn(&[5, 40, 10], |_| rng.sample(StandardNormal));
        let d = mode_residual_correlation(&r, 0).unwrap();
        for i in 0..5 {
            assert_eq!(d.correlation[(i, i)], 1.0);
            for j in 0..5 {
                if i != j {
                    assert!(d.correlation[(i, j)].abs() < 4.0 / 400f64.sqrt());
                }
            }
        }
        assert!(d.eigenvalues.windows(2).all(|w| w[0] >= w[1]));

        let dup = Tensor::from_fn(&[2, 6], |i| (i[1] as f64).sin());
        let d = mode_residual_correlation(&dup, 0).unwrap();
        assert!((d.correlation[(0, 1)] - 1.0).abs() < 1e-12);

        let flat = Tensor::from_fn(&[2, 6], |i| if i[0] == 0 { 1.0 } else { i[1] as f64 });
        let d = mode_residual_correlation(&flat, 0).unwrap();
        assert_eq!(d.correlation[(0, 1)], 0.0);
        assert_eq!(d.correlation[(0, 0)], 1.0);
    }
}
