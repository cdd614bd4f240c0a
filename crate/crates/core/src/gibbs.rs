//! Gibbs sampler for the multilinear regression model with conjugate
//! inverse-Wishart / matrix normal priors on each `(Σ_k, B_k)` and an
//! inverse-gamma prior on `τ²`.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::als::{fit_als_with_fixed, initial_factors, normalize_scale, predict, AlsOptions, Init, RegressionDataset};
use crate::error::{Error, Result};
use crate::gls::{along_modes, impute, SeparableCovariance};
use crate::linalg::{cholesky, inv_sqrt, spd_inverse, sqrt_psd, symmetrize};
use crate::rng::{child_seed, stream_rng};
use crate::tensor::KroneckerFactorSet;

/// Prior for one mode: `Σ ~ IW(S_0^{-1}, ν_0)`, `B | Σ ~ MN(M_0, Σ, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePrior {
    /// `None` means a zero prior mean.
    pub m0: Option<DMatrix<f64>>,
    pub s0: DMatrix<f64>,
    pub nu0: f64,
}

impl ModePrior {
    pub fn default_for(m: usize) -> Self {
        Self { m0: None, s0: DMatrix::identity(m, m), nu0: m as f64 + 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub modes: Vec<ModePrior>,
    pub eta0: f64,
    pub tau0_sq: f64,
}

impl PriorSpec {
    /// `S_0 = I`, `ν_0 = m_k + 1`, `M_0 = 0`, `η_0 = τ_0² = 1`.
    pub fn default_for(output_dims: &[usize]) -> Self {
        Self { modes: output_dims.iter().map(|&m| ModePrior::default_for(m)).collect(), eta0: 1.0, tau0_sq: 1.0 }
    }

    pub fn validate(&self, data: &RegressionDataset) -> Result<()> {
        if self.modes.len() != data.modes() {
            return Err(Error::InvalidArgument(format!(
                "prior has {} modes, model has {}",
                self.modes.len(),
                data.modes()
            )));
        }
        if !(self.eta0 > 0.0) || !(self.tau0_sq > 0.0) {
            return Err(Error::InvalidArgument("eta0 and tau0^2 must be positive".into()));
        }
        for (k, p) in self.modes.iter().enumerate() {
            let (m, pk) = (data.output_dims()[k], data.input_dims()[k]);
            if p.s0.shape() != (m, m) {
                return Err(Error::Shape(format!("prior scale for mode {k} must be {m}x{m}")));
            }
            cholesky(&p.s0, &format!("prior scale for mode {k}"))?;
            if !(p.nu0 > m as f64 - 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "prior degrees of freedom for mode {k} must exceed {}",
                    m - 1
                )));
            }
            if let Some(m0) = &p.m0 {
                if m0.shape() != (m, pk) {
                    return Err(Error::Shape(format!("prior mean for mode {k} must be {m}x{pk}")));
                }
            }
        }
        Ok(())
    }
}

/// Draws `Σ` with `Σ^{-1} ~ Wishart(S_inv, ν)`, so `E[Σ^{-1}] = ν S_inv`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(s_inv: &DMatrix<f64>, nu: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let w = sample_wishart(s_inv, nu, rng)?;
    spd_inverse(&w, "inverse-Wishart draw")
}

/// Bartlett decomposition with real-valued degrees of freedom.
pub fn sample_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, nu: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if !(nu > d as f64 - 1.0) || !nu.is_finite() {
        return Err(Error::InvalidArgument(format!("Wishart needs dof > {}, got {nu}", d as f64 - 1.0)));
    }
    let l = cholesky(scale, "Wishart scale")?.l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    Ok(symmetrize(&(&la * la.transpose())))
}

/// `M + RowCov^{1/2} Z ColCov^{1/2}`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    row_cov: &DMatrix<f64>,
    col_cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (m, p) = mean.shape();
    if row_cov.shape() != (m, m) || col_cov.shape() != (p, p) {
        return Err(Error::Shape(format!(
            "matrix normal {m}x{p} needs {m}x{m} and {p}x{p} covariances"
        )));
    }
    let r = sqrt_psd(row_cov)?;
    let c = sqrt_psd(col_cov)?;
    let z = DMatrix::from_fn(m, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + r * z * c)
}

/// Draws `τ² ~ IG(shape, rate)` as the reciprocal of a gamma variate.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(rate > 0.0) {
        return Err(Error::InvalidArgument(format!("inverse-gamma needs positive shape and rate, got {shape}, {rate}")));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    loop {
        let v = g.sample(rng);
        if v > 0.0 {
            return Ok(1.0 / v);
        }
    }
}

/// Full conditional of `τ²` given the whitened residual sum of squares over `m` entries.
pub fn sample_tau2<R: Rng + ?Sized>(
    residual_norm_sq: f64,
    m_total: usize,
    eta0: f64,
    tau0_sq: f64,
    rng: &mut R,
) -> Result<f64> {
    if residual_norm_sq < 0.0 || m_total == 0 || !(eta0 > 0.0) || !(tau0_sq > 0.0) {
        return Err(Error::InvalidArgument("tau2 full conditional needs positive inputs".into()));
    }
    sample_inverse_gamma((eta0 + m_total as f64) / 2.0, (eta0 * tau0_sq + residual_norm_sq) / 2.0, rng)
}

/// Posterior parameters of `Ỹ = B X̃ + E`, `E ~ MN(0, Σ, I)`, under a [`ModePrior`].
#[derive(Debug, Clone)]
pub struct ModePosterior {
    pub s_n: DMatrix<f64>,
    pub m_n: DMatrix<f64>,
    /// `(I + X̃ X̃ᵀ)^{-1}`.
    pub v: DMatrix<f64>,
    pub nu_n: f64,
}

pub fn mode_posterior(yt: &DMatrix<f64>, xt: &DMatrix<f64>, prior: &ModePrior) -> Result<ModePosterior> {
    if yt.ncols() != xt.ncols() {
        return Err(Error::Shape(format!("Y has {} columns, X has {}", yt.ncols(), xt.ncols())));
    }
    let p = xt.nrows();
    let m = yt.nrows();
    let mut vinv = xt * xt.transpose();
    for i in 0..p {
        vinv[(i, i)] += 1.0;
    }
    let v = spd_inverse(&vinv, "I + X Xᵀ")?;
    let m0 = prior.m0.clone().unwrap_or_else(|| DMatrix::zeros(m, p));
    let m_n = (&m0 + yt * xt.transpose()) * &v;
    let s_n = symmetrize(
        &(&prior.s0 + yt * yt.transpose() + &m0 * m0.transpose() - &m_n * &vinv * m_n.transpose()),
    );
    Ok(ModePosterior { s_n, m_n, v, nu_n: prior.nu0 + yt.ncols() as f64 })
}

/// Draws `(Σ_k, B_k)` from their joint full conditional.
pub fn posterior_update_mode<R: Rng + ?Sized>(
    yt: &DMatrix<f64>,
    xt: &DMatrix<f64>,
    prior: &ModePrior,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let post = mode_posterior(yt, xt, prior)?;
    let sigma = sample_inverse_wishart(&spd_inverse(&post.s_n, "S_n")?, post.nu_n, rng)?;
    let b = sample_matrix_normal(&post.m_n, &sigma, &post.v, rng)?;
    Ok((sigma, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub factors: KroneckerFactorSet,
    pub covariance: SeparableCovariance,
    pub iteration: usize,
}

/// Sum of the leading diagonal; rectangular factors included.
fn diagonal_sum(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum()
}

/// Equal-norm scaling of the free factors plus a sign convention (every free
/// factor but the last has a nonnegative diagonal sum; the last one absorbs
/// the flips), and the trace gauge on the mode covariances. The Kronecker
/// products of both are unchanged.
pub fn normalize_factors(state: &GibbsState) -> Result<GibbsState> {
    let mut factors = normalize_scale(&state.factors)?;
    let free = factors.free_modes();
    if let Some((&last, rest)) = free.split_last() {
        let mut flips = 0;
        for &k in rest {
            if diagonal_sum(factors.matrix(k)) < 0.0 {
                factors.set_matrix(k, -factors.matrix(k));
                flips += 1;
            }
        }
        if flips % 2 == 1 {
            factors.set_matrix(last, -factors.matrix(last));
        }
    }
    let mut covariance = state.covariance.clone();
    covariance.apply_trace_gauge();
    Ok(GibbsState { factors, covariance, iteration: state.iteration })
}

#[derive(Debug, Clone)]
pub struct GibbsConfig {
    /// Total iterations per chain, burn-in included.
    pub iters: usize,
    pub burnin: usize,
    pub chains: usize,
    pub thin: usize,
    pub seed: u64,
    /// Start chain 0 at the least-squares estimate.
    pub warm_start: bool,
    /// Hold `τ²` at this value instead of sampling it.
    pub fix_tau2: Option<f64>,
    /// Modes whose factor is pinned to the identity.
    pub fixed_modes: Vec<usize>,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { iters: 5500, burnin: 500, chains: 4, thin: 1, seed: 0, warm_start: true, fix_tau2: None, fixed_modes: Vec::new() }
    }
}

/// Saved (normalized, post burn-in, thinned) draws of one chain.
#[derive(Debug, Clone)]
pub struct Chain {
    pub index: usize,
    pub seed: u64,
    pub draws: Vec<GibbsState>,
    pub iterations_completed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ChainStore {
    pub chains: Vec<Chain>,
    pub config: GibbsConfig,
    pub prior: PriorSpec,
}

impl ChainStore {
    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn failures(&self) -> Vec<&Chain> {
        self.chains.iter().filter(|c| c.error.is_some()).collect()
    }
}

fn initial_state(data: &RegressionDataset, cfg: &GibbsConfig, chain: usize) -> Result<GibbsState> {
    let m = data.y().len() as f64;
    let mut factors = None;
    if chain == 0 && cfg.warm_start {
        match fit_als_with_fixed(data, &Init::Identity, &cfg.fixed_modes, &AlsOptions::default()) {
            Ok(fit) => factors = Some(fit.factors),
            Err(e) => warn!("least-squares warm start failed ({e}); starting chain 0 at random"),
        }
    }
    let factors = match factors {
        Some(f) => f,
        None => initial_factors(data, &Init::Random { seed: child_seed(cfg.seed, chain as u64) }, &cfg.fixed_modes)?,
    };
    let resid = impute(data, &factors)?.sub(&predict(&factors, data.x())?)?;
    let mut tau2 = resid.frobenius_norm_sq() / m;
    if let Some(t) = cfg.fix_tau2 {
        tau2 = t;
    } else if !(tau2 > 0.0) {
        tau2 = 1.0;
    }
    let mut covariance = SeparableCovariance::identity(data.output_dims());
    covariance.tau2 = tau2;
    Ok(GibbsState { factors, covariance, iteration: 0 })
}

/// One full scan: every `(Σ_k, B_k)` in turn, then `τ²`.
pub fn gibbs_step<R: Rng + ?Sized>(
    data: &RegressionDataset,
    prior: &PriorSpec,
    state: &mut GibbsState,
    fix_tau2: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    let kk = data.modes();
    for k in 0..kk {
        let w: Vec<DMatrix<f64>> = state.covariance.sigmas.iter().map(inv_sqrt).collect::<Result<_>>()?;
        let tau = state.covariance.tau2.sqrt();
        let y = impute(data, &state.factors)?;
        let yt = along_modes(&y, &w, Some(k))?.matricize(k)? / tau;
        let wb: Vec<DMatrix<f64>> = state
            .factors
            .iter()
            .zip(&w)
            .map(|(f, wj)| if f.fixed_identity { wj.clone() } else { wj * &f.matrix })
            .collect();
        let xt = along_modes(data.x(), &wb, Some(k))?.matricize(k)? / tau;
        let p = &prior.modes[k];
        if state.factors[k].fixed_identity {
            let r = &yt - &xt;
            let s_n = symmetrize(&(&p.s0 + &r * r.transpose()));
            let sigma = sample_inverse_wishart(&spd_inverse(&s_n, "S_n")?, p.nu0 + r.ncols() as f64, rng)?;
            state.covariance.sigmas[k] = sigma;
        } else {
            let (sigma, b) = posterior_update_mode(&yt, &xt, p, rng)?;
            state.covariance.sigmas[k] = sigma;
            state.factors.set_matrix(k, b);
        }
    }
    match fix_tau2 {
        Some(t) => state.covariance.tau2 = t,
        None => {
            let w: Vec<DMatrix<f64>> = state.covariance.sigmas.iter().map(inv_sqrt).collect::<Result<_>>()?;
            let resid = impute(data, &state.factors)?.sub(&predict(&state.factors, data.x())?)?;
            let q = along_modes(&resid, &w, None)?.frobenius_norm_sq();
            state.covariance.tau2 = sample_tau2(q, resid.len(), prior.eta0, prior.tau0_sq, rng)?;
        }
    }
    state.iteration += 1;
    Ok(())
}

fn run_chain(data: &RegressionDataset, prior: &PriorSpec, cfg: &GibbsConfig, index: usize) -> Chain {
    let seed = child_seed(cfg.seed, 1000 + index as u64);
    let mut chain = Chain { index, seed, draws: Vec::new(), iterations_completed: 0, error: None };
    let wrap = |iteration: usize, e: Error| Error::Sampler { chain: index, iteration, source: Box::new(e) };
    let mut state = match initial_state(data, cfg, index) {
        Ok(s) => s,
        Err(e) => {
            chain.error = Some(wrap(0, e).to_string());
            return chain;
        }
    };
    let mut rng = stream_rng(cfg.seed, index as u64 + 1);
    for it in 1..=cfg.iters {
        let step = gibbs_step(data, prior, &mut state, cfg.fix_tau2, &mut rng)
            .and_then(|_| {
                if it > cfg.burnin && (it - cfg.burnin).is_multiple_of(cfg.thin) {
                    chain.draws.push(normalize_factors(&state)?);
                }
                Ok(())
            });
        if let Err(e) = step {
            chain.error = Some(wrap(it, e).to_string());
            return chain;
        }
        chain.iterations_completed = it;
    }
    chain
}

/// Runs independent chains in parallel. A chain that hits an error stops
/// there; its saved draws are kept and the error is recorded on the chain.
pub fn gibbs_run(data: &RegressionDataset, prior: &PriorSpec, cfg: &GibbsConfig) -> Result<ChainStore> {
    if data.n() == 0 {
        return Err(Error::InvalidArgument("no replications".into()));
    }
    if cfg.iters <= cfg.burnin {
        return Err(Error::InvalidArgument(format!("iters ({}) must exceed burnin ({})", cfg.iters, cfg.burnin)));
    }
    if cfg.chains == 0 || cfg.thin == 0 {
        return Err(Error::InvalidArgument("chains and thin must be at least 1".into()));
    }
    if let Some(t) = cfg.fix_tau2 {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument("fixed tau2 must be positive".into()));
        }
    }
    prior.validate(data)?;
    let chains: Vec<Chain> = (0..cfg.chains).into_par_iter().map(|c| run_chain(data, prior, cfg, c)).collect();
    Ok(ChainStore { chains, config: cfg.clone(), prior: prior.clone() })
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Significance convention for one factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlagRule {
    /// Lower 99% quantile above zero.
    LowerQuantilePositive,
    /// Central 95% interval excludes zero.
    IntervalExcludesZero,
}

#[derive(Debug, Clone)]
pub struct SummaryOptions {
    pub levels: Vec<f64>,
    /// Per-mode rules; by default square factors use the lower-quantile rule
    /// and rectangular ones the interval rule.
    pub rules: Option<Vec<FlagRule>>,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self { levels: vec![0.01, 0.025, 0.975, 0.99], rules: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntrySummary {
    pub mode: usize,
    pub row: usize,
    pub col: usize,
    pub mean: f64,
    pub sd: f64,
    /// Quantiles at [`PosteriorSummary::levels`].
    pub quantiles: Vec<f64>,
    pub flag: bool,
    /// Standard deviation of the per-chain posterior means (0 with one chain).
    pub chain_sd: f64,
}

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub levels: Vec<f64>,
    pub entries: Vec<EntrySummary>,
    pub tau2_mean: f64,
    pub draws: usize,
    pub max_chain_sd: f64,
}

impl PosteriorSummary {
    pub fn entry(&self, mode: usize, row: usize, col: usize) -> Option<&EntrySummary> {
        self.entries.iter().find(|e| e.mode == mode && e.row == row && e.col == col)
    }

    /// Posterior mean of each factor as a matrix.
    pub fn mean_matrix(&self, mode: usize) -> DMatrix<f64> {
        let es: Vec<&EntrySummary> = self.entries.iter().filter(|e| e.mode == mode).collect();
        let rows = es.iter().map(|e| e.row + 1).max().unwrap_or(0);
        let cols = es.iter().map(|e| e.col + 1).max().unwrap_or(0);
        let mut m = DMatrix::zeros(rows, cols);
        for e in es {
            m[(e.row, e.col)] = e.mean;
        }
        m
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pools the saved draws of all chains into per-entry summaries of the factors.
pub fn summarize(store: &ChainStore, opts: &SummaryOptions) -> Result<PosteriorSummary> {
    let chains: Vec<&Chain> = store.chains.iter().filter(|c| !c.draws.is_empty()).collect();
    if chains.is_empty() {
        return Err(Error::InvalidArgument("no saved draws to summarize".into()));
    }
    if opts.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::InvalidArgument("quantile levels must lie in [0, 1]".into()));
    }
    let first = &chains[0].draws[0].factors;
    let mut entries = Vec::new();
    for k in 0..first.len() {
        let (rows, cols) = (first[k].rows(), first[k].cols());
        let rule = match &opts.rules {
            Some(r) => *r.get(k).ok_or_else(|| Error::InvalidArgument(format!("no flag rule for mode {k}")))?,
            None if rows == cols => FlagRule::LowerQuantilePositive,
            None => FlagRule::IntervalExcludesZero,
        };
        for col in 0..cols {
            for row in 0..rows {
                let mut pooled = Vec::new();
                let mut chain_means = Vec::new();
                for c in &chains {
                    let v: Vec<f64> = c.draws.iter().map(|d| d.factors.matrix(k)[(row, col)]).collect();
                    chain_means.push(mean_sd(&v).0);
                    pooled.extend(v);
                }
                let (mean, sd) = mean_sd(&pooled);
                pooled.sort_by(f64::total_cmp);
                let quantiles = opts.levels.iter().map(|&l| quantile_sorted(&pooled, l)).collect();
                let flag = match rule {
                    FlagRule::LowerQuantilePositive => quantile_sorted(&pooled, 0.01) > 0.0,
                    FlagRule::IntervalExcludesZero => {
                        quantile_sorted(&pooled, 0.025) > 0.0 || quantile_sorted(&pooled, 0.975) < 0.0
                    }
                };
                entries.push(EntrySummary { mode: k, row, col, mean, sd, quantiles, flag, chain_sd: mean_sd(&chain_means).1 });
            }
        }
    }
    let taus: Vec<f64> = chains.iter().flat_map(|c| c.draws.iter().map(|d| d.covariance.tau2)).collect();
    let max_chain_sd = entries.iter().map(|e| e.chain_sd).fold(0.0, f64::max);
    Ok(PosteriorSummary {
        levels: opts.levels.clone(),
        entries,
        tau2_mean: mean_sd(&taus).0,
        draws: taus.len(),
        max_chain_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn mat(r: usize, c: usize, g: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| g.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn inverse_wishart_scalar_mean() {
        let mut g = rng(1);
        let s_inv = DMatrix::from_element(1, 1, 0.5);
        let n = 100_000;
        let mean: f64 =
            (0..n).map(|_| 1.0 / sample_inverse_wishart(&s_inv, 5.0, &mut g).unwrap()[(0, 0)]).sum::<f64>() / n as f64;
        assert!((mean - 2.5).abs() < 0.02 * 2.5, "{mean}");
    }

    #[test]
    fn inverse_wishart_concentrates() {
        let mut g = rng(2);
        let nu = 1e6;
        let s_inv = DMatrix::identity(3, 3) / nu;
        let draw = sample_inverse_wishart(&s_inv, nu, &mut g).unwrap();
        assert!((draw - DMatrix::identity(3, 3)).amax() < 0.01);
        for _ in 0..100 {
            let d = sample_inverse_wishart(&DMatrix::identity(4, 4), 4.0, &mut g).unwrap();
            assert!(d.clone().cholesky().is_some());
        }
        assert!(sample_inverse_wishart(&DMatrix::identity(4, 4), 2.5, &mut g).is_err());
    }

    #[test]
    fn matrix_normal_examples() {
        let mut g = rng(3);
        let m = mat(2, 3, &mut g);
        let z = sample_matrix_normal(&m, &DMatrix::zeros(2, 2), &DMatrix::identity(3, 3), &mut g).unwrap();
        assert_eq!(z, m);

        let row = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
        let col = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, -0.5, 1.0]);
        let zero = DMatrix::zeros(2, 2);
        let n = 100_000;
        let mut acc = DMatrix::zeros(4, 4);
        for _ in 0..n {
            let d = sample_matrix_normal(&zero, &row, &col, &mut g).unwrap();
            let v = nalgebra::DVector::from_column_slice(d.as_slice());
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        let want = col.kronecker(&row);
        for (a, w) in acc.iter().zip(want.iter()) {
            assert!((a - w).abs() < 0.05 * w.abs().max(0.5), "{a} vs {w}");
        }
    }

    #[test]
    fn tau2_draws() {
        let mut g = rng(4);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_inverse_gamma(6.0, 10.0, &mut g).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.04, "{mean}");
        for _ in 0..1000 {
            assert!(sample_tau2(0.0, 3, 1.0, 1.0, &mut g).unwrap() > 0.0);
        }
        // Zero residual with unit prior: IG((1 + m)/2, 1/2); m = 9 gives mean 0.5 / 4.
        let mean = (0..n).map(|_| sample_tau2(0.0, 9, 1.0, 1.0, &mut g).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.125).abs() < 0.01 * 0.125 * 3.0);
        assert!(sample_tau2(1.0, 0, 1.0, 1.0, &mut g).is_err());
        assert!(sample_tau2(1.0, 3, 0.0, 1.0, &mut g).is_err());
    }

    #[test]
    fn posterior_with_zero_design() {
        let mut g = rng(5);
        let y = mat(3, 10, &mut g);
        let x = DMatrix::zeros(2, 10);
        let m0 = mat(3, 2, &mut g);
        let prior = ModePrior { m0: Some(m0.clone()), s0: DMatrix::identity(3, 3) * 2.0, nu0: 4.0 };
        let post = mode_posterior(&y, &x, &prior).unwrap();
        assert!((post.m_n - &m0).amax() < 1e-12);
        assert!((post.s_n - (DMatrix::identity(3, 3) * 2.0 + &y * y.transpose())).amax() < 1e-10);
        assert_eq!(post.nu_n, 14.0);
    }

    #[test]
    fn efficient_scale_matches_direct_form() {
        let mut g = rng(6);
        let y = mat(4, 20, &mut g);
        let x = mat(3, 20, &mut g);
        let prior = ModePrior::default_for(4);
        let post = mode_posterior(&y, &x, &prior).unwrap();
        let big = (DMatrix::identity(20, 20) + x.transpose() * &x).try_inverse().unwrap();
        let direct = DMatrix::identity(4, 4) + &y * big * y.transpose();
        assert!((post.s_n - &direct).amax() < 1e-9);
        let inner = (DMatrix::identity(3, 3) + &x * x.transpose()).try_inverse().unwrap();
        let woodbury = DMatrix::identity(4, 4) + &y * (DMatrix::identity(20, 20) - x.transpose() * inner * &x) * y.transpose();
        assert!((woodbury - direct).amax() < 1e-9);
    }

    fn small_problem(seed: u64, n: usize) -> (RegressionDataset, KroneckerFactorSet) {
        let mut g = rng(seed);
        let f = KroneckerFactorSet::from_matrices(vec![
            DMatrix::identity(3, 3) + mat(3, 3, &mut g) * 0.3,
            DMatrix::identity(2, 2) + mat(2, 2, &mut g) * 0.3,
        ])
        .unwrap();
        let x = Tensor::from_fn(&[3, 2, n], |_| g.sample(StandardNormal));
        let y = predict(&f, &x)
            .unwrap()
            .add(&Tensor::from_fn(&[3, 2, n], |_| 0.5 * g.sample::<f64, _>(StandardNormal)))
            .unwrap();
        (RegressionDataset::new(x, y, None).unwrap(), f)
    }

    #[test]
    fn runs_are_reproducible() {
        let (data, _) = small_problem(7, 30);
        let prior = PriorSpec::default_for(data.output_dims());
        let cfg = GibbsConfig { iters: 60, burnin: 10, chains: 2, seed: 11, ..Default::default() };
        let a = gibbs_run(&data, &prior, &cfg).unwrap();
        let b = gibbs_run(&data, &prior, &cfg).unwrap();
        for (ca, cb) in a.chains.iter().zip(&b.chains) {
            assert_eq!(ca.draws, cb.draws);
            assert_eq!(ca.draws.len(), 50);
        }
        assert_ne!(a.chains[0].draws, a.chains[1].draws);
        for c in &a.chains {
            for d in &c.draws {
                assert!(d.covariance.tau2 > 0.0);
                for s in &d.covariance.sigmas {
                    assert!(s.clone().cholesky().is_some());
                }
            }
        }
    }

    #[test]
    fn run_preconditions() {
        let (data, _) = small_problem(8, 10);
        let prior = PriorSpec::default_for(data.output_dims());
        let bad = GibbsConfig { iters: 10, burnin: 10, ..Default::default() };
        assert!(gibbs_run(&data, &prior, &bad).is_err());
        let bad = GibbsConfig { iters: 10, burnin: 0, chains: 0, ..Default::default() };
        assert!(gibbs_run(&data, &prior, &bad).is_err());
        let mut p = prior.clone();
        p.modes[0].nu0 = 1.5;
        assert!(gibbs_run(&data, &p, &GibbsConfig { iters: 5, burnin: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn normalization_gauge() {
        let mut g = rng(9);
        let a = mat(3, 3, &mut g);
        let b = mat(2, 2, &mut g);
        let cov = SeparableCovariance::new(
            vec![DMatrix::identity(3, 3) * 2.0, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])],
            0.7,
        )
        .unwrap();
        let state = |c: f64| GibbsState {
            factors: KroneckerFactorSet::from_matrices(vec![&a * c, &b / c]).unwrap(),
            covariance: cov.clone(),
            iteration: 3,
        };
        let base = normalize_factors(&state(1.0)).unwrap();
        for c in [2.5, -0.3, -4.0] {
            let other = normalize_factors(&state(c)).unwrap();
            for k in 0..2 {
                assert!((other.factors.matrix(k) - base.factors.matrix(k)).amax() < 1e-12);
            }
        }
        let again = normalize_factors(&base).unwrap();
        assert_eq!(again.factors.kronecker_chain(), base.factors.kronecker_chain());
        assert!((base.factors.kronecker_chain() - state(1.0).factors.kronecker_chain()).amax() < 1e-10);
        assert!((base.covariance.vectorized() - cov.vectorized()).amax() < 1e-10);
        assert!(diagonal_sum(base.factors.matrix(0)) >= 0.0);
    }

    fn constant_store(values: &[f64]) -> ChainStore {
        let draws = values
            .iter()
            .enumerate()
            .map(|(i, &v)| GibbsState {
                factors: KroneckerFactorSet::from_matrices(vec![DMatrix::from_element(1, 1, v)]).unwrap(),
                covariance: SeparableCovariance::identity(&[1]),
                iteration: i,
            })
            .collect();
        ChainStore {
            chains: vec![Chain { index: 0, seed: 0, draws, iterations_completed: values.len(), error: None }],
            config: GibbsConfig::default(),
            prior: PriorSpec::default_for(&[1]),
        }
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&constant_store(&[1.5; 20]), &SummaryOptions::default()).unwrap();
        let e = &s.entries[0];
        assert_eq!(e.sd, 0.0);
        assert!(e.quantiles.iter().all(|&q| q == 1.5));
        assert!(e.flag);

        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let s = summarize(&constant_store(&alt), &SummaryOptions::default()).unwrap();
        assert_eq!(s.entries[0].mean, 0.0);
        assert!(!s.entries[0].flag);

        let mut g = rng(10);
        let normal: Vec<f64> = (0..200_000).map(|_| g.sample(StandardNormal)).collect();
        let s = summarize(&constant_store(&normal), &SummaryOptions::default()).unwrap();
        let q = &s.entries[0].quantiles;
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
        assert!((q[3] - 2.326).abs() < 0.03, "{}", q[3]);

        let empty = constant_store(&[]);
        assert!(summarize(&empty, &SummaryOptions::default()).is_err());
    }
}
