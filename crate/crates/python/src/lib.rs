//! Python bindings: tensors, factor sets, ALS/GLS fits, the Gibbs sampler
//! and predictive R². Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tenreg::als::fit_als_with_fixed;
use tenreg::{io, ErrorKind};

fn err(e: tenreg::Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Io => PyOSError::new_err(msg),
        ErrorKind::Parse | ErrorKind::Usage => PyValueError::new_err(msg),
        ErrorKind::Numerical => PyArithmeticError::new_err(msg),
        ErrorKind::Sampler => PyRuntimeError::new_err(msg),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Dense column-major tensor (first index fastest).
#[pyclass(module = "tenreg", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: tenreg::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(dims: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: tenreg::Tensor::new(dims, data).map_err(err)? })
    }

    #[staticmethod]
    fn zeros(dims: Vec<usize>) -> Self {
        Self { inner: tenreg::Tensor::zeros(&dims) }
    }

    #[staticmethod]
    fn from_matrix(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: tenreg::Tensor::from_matrix(&to_matrix(rows)?) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::load_tensor(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_tensor(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, idx: Vec<usize>) -> PyResult<f64> {
        let dims = self.inner.dims();
        if idx.len() != dims.len() || idx.iter().zip(dims).any(|(&i, &d)| i >= d) {
            return Err(PyIndexError::new_err(format!("index {idx:?} out of range for {dims:?}")));
        }
        Ok(self.inner.get(&idx))
    }

    /// Mode-k unfolding as a list of rows.
    fn matricize(&self, k: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_matrix(&self.inner.matricize(k).map_err(err)?))
    }

    fn mode_product(&self, k: usize, matrix: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.mode_product(k, &to_matrix(matrix)?).map_err(err)? })
    }

    /// Product with one factor per mode.
    fn tucker(&self, factors: &Factors) -> PyResult<Self> {
        Ok(Self { inner: self.inner.tucker_product(&factors.inner).map_err(err)? })
    }

    fn frobenius_norm_sq(&self) -> f64 {
        self.inner.frobenius_norm_sq()
    }

    fn __sub__(&self, other: &Tensor) -> PyResult<Self> {
        Ok(Self { inner: self.inner.sub(&other.inner).map_err(err)? })
    }

    fn __add__(&self, other: &Tensor) -> PyResult<Self> {
        Ok(Self { inner: self.inner.add(&other.inner).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?})", self.inner.dims())
    }
}

/// One factor matrix per non-replication mode.
#[pyclass(module = "tenreg", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Factors {
    inner: tenreg::KroneckerFactorSet,
}

#[pymethods]
impl Factors {
    #[new]
    fn new(matrices: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let mats = matrices.into_iter().map(to_matrix).collect::<PyResult<Vec<_>>>()?;
        Ok(Self { inner: tenreg::KroneckerFactorSet::from_matrices(mats).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: io::factors_from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        io::factors_to_json(&self.inner).map_err(err)
    }

    fn matrices(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.inner.len()).map(|k| from_matrix(self.inner.matrix(k))).collect()
    }

    /// B_K ⊗ … ⊗ B_1.
    fn kronecker_chain(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.kronecker_chain())
    }

    /// Applies the factors to x, with an identity on a trailing replication mode.
    fn predict(&self, x: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor { inner: tenreg::predict(&self.inner, &x.inner).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let shapes: Vec<(usize, usize)> = self.inner.factors().iter().map(|f| (f.rows(), f.cols())).collect();
        format!("Factors({shapes:?})")
    }
}

#[pyclass(module = "tenreg", frozen, get_all)]
struct AlsResult {
    factors: Factors,
    objective_trace: Vec<f64>,
    sweeps: usize,
    converged: bool,
}

#[pymethods]
impl AlsResult {
    #[getter]
    fn rss(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

#[pyclass(module = "tenreg", frozen, get_all)]
struct GlsResult {
    factors: Factors,
    sigmas: Vec<Vec<Vec<f64>>>,
    tau2: f64,
    nll_trace: Vec<f64>,
    sweeps: usize,
    converged: bool,
}

/// (mode, row, col, mean, sd, quantiles, flag)
type Entry = (usize, usize, usize, f64, f64, Vec<f64>, bool);

/// Posterior means, sds and quantiles of every factor entry (0-based indices).
#[pyclass(module = "tenreg", frozen, get_all)]
struct PosteriorSummary {
    levels: Vec<f64>,
    tau2_mean: f64,
    draws: usize,
    max_chain_sd: f64,
    entries: Vec<Entry>,
    csv: String,
    failed_chains: Vec<usize>,
}

#[pymethods]
impl PosteriorSummary {
    /// Posterior mean of factor `mode` as a list of rows.
    fn mean(&self, mode: usize) -> PyResult<Vec<Vec<f64>>> {
        let e: Vec<_> = self.entries.iter().filter(|e| e.0 == mode).collect();
        if e.is_empty() {
            return Err(PyIndexError::new_err(format!("no mode {mode}")));
        }
        let rows = e.iter().map(|e| e.1).max().unwrap() + 1;
        let cols = e.iter().map(|e| e.2).max().unwrap() + 1;
        let mut m = vec![vec![0.0; cols]; rows];
        for e in e {
            m[e.1][e.2] = e.3;
        }
        Ok(m)
    }
}

fn dataset(x: &Tensor, y: &Tensor, mask: Option<&Tensor>) -> PyResult<tenreg::RegressionDataset> {
    let mask = mask
        .map(|m| tenreg::Mask::new(m.inner.dims().to_vec(), m.inner.data().iter().map(|&v| v != 0.0).collect()))
        .transpose()
        .map_err(err)?;
    tenreg::RegressionDataset::new(x.inner.clone(), y.inner.clone(), mask).map_err(err)
}

fn init(name: &str, seed: u64) -> PyResult<tenreg::Init> {
    match name {
        "random" => Ok(tenreg::Init::Random { seed }),
        "identity" => Ok(tenreg::Init::Identity),
        _ => Err(PyValueError::new_err(format!("unknown init '{name}' (random, identity)"))),
    }
}

fn als_options(tol: Option<f64>, max_sweeps: Option<usize>, ridge: Option<f64>) -> tenreg::AlsOptions {
    let d = tenreg::AlsOptions::default();
    tenreg::AlsOptions { tol: tol.unwrap_or(d.tol), max_sweeps: max_sweeps.unwrap_or(d.max_sweeps), ridge: ridge.unwrap_or(d.ridge) }
}

/// Least-squares fit of y ≈ x ×{B_1..B_K}. A nonzero mask entry excludes that outcome.
#[pyfunction]
#[pyo3(signature = (x, y, mask=None, *, seed=0, init="random", tol=None, max_sweeps=None, ridge=None, fixed_modes=vec![]))]
#[allow(clippy::too_many_arguments)]
fn fit_als(
    py: Python<'_>,
    x: &Tensor,
    y: &Tensor,
    mask: Option<&Tensor>,
    seed: u64,
    init: &str,
    tol: Option<f64>,
    max_sweeps: Option<usize>,
    ridge: Option<f64>,
    fixed_modes: Vec<usize>,
) -> PyResult<AlsResult> {
    let data = dataset(x, y, mask)?;
    let start = self::init(init, seed)?;
    let opts = als_options(tol, max_sweeps, ridge);
    let fit = py.detach(|| fit_als_with_fixed(&data, &start, &fixed_modes, &opts)).map_err(err)?;
    Ok(AlsResult {
        factors: Factors { inner: fit.factors },
        objective_trace: fit.objective_trace,
        sweeps: fit.sweeps,
        converged: fit.converged,
    })
}

/// Generalized least squares with separable residual covariance.
#[pyfunction]
#[pyo3(signature = (x, y, mask=None, *, seed=0, init="random", tol=None, max_sweeps=None, ridge=None, fixed_modes=vec![]))]
#[allow(clippy::too_many_arguments)]
fn fit_gls(
    py: Python<'_>,
    x: &Tensor,
    y: &Tensor,
    mask: Option<&Tensor>,
    seed: u64,
    init: &str,
    tol: Option<f64>,
    max_sweeps: Option<usize>,
    ridge: Option<f64>,
    fixed_modes: Vec<usize>,
) -> PyResult<GlsResult> {
    let data = dataset(x, y, mask)?;
    let start = self::init(init, seed)?;
    let opts = tenreg::GlsOptions { als: als_options(tol, max_sweeps, ridge), estimate_covariance: true };
    let g = py.detach(|| tenreg::fit_gls(&data, &start, None, &fixed_modes, &opts)).map_err(err)?;
    Ok(GlsResult {
        factors: Factors { inner: g.factors },
        sigmas: g.covariance.sigmas.iter().map(from_matrix).collect(),
        tau2: g.covariance.tau2,
        nll_trace: g.nll_trace,
        sweeps: g.sweeps,
        converged: g.converged,
    })
}

/// Runs the Gibbs sampler under the default conjugate prior and summarizes the draws.
#[pyfunction]
#[pyo3(signature = (x, y, mask=None, *, iters=5500, burnin=500, chains=4, thin=1, seed=0, warm_start=true, fix_tau2=None, fixed_modes=vec![]))]
#[allow(clippy::too_many_arguments)]
fn gibbs(
    py: Python<'_>,
    x: &Tensor,
    y: &Tensor,
    mask: Option<&Tensor>,
    iters: usize,
    burnin: usize,
    chains: usize,
    thin: usize,
    seed: u64,
    warm_start: bool,
    fix_tau2: Option<f64>,
    fixed_modes: Vec<usize>,
) -> PyResult<PosteriorSummary> {
    let data = dataset(x, y, mask)?;
    let prior = tenreg::PriorSpec::default_for(data.output_dims());
    let cfg = tenreg::GibbsConfig { iters, burnin, chains, thin, seed, warm_start, fix_tau2, fixed_modes };
    let (store, s) = py
        .detach(|| {
            let store = tenreg::gibbs_run(&data, &prior, &cfg)?;
            let s = tenreg::summarize(&store, &tenreg::SummaryOptions::default())?;
            Ok((store, s))
        })
        .map_err(err)?;
    Ok(PosteriorSummary {
        levels: s.levels.clone(),
        tau2_mean: s.tau2_mean,
        draws: s.draws,
        max_chain_sd: s.max_chain_sd,
        entries: s
            .entries
            .iter()
            .map(|e| (e.mode, e.row, e.col, e.mean, e.sd, e.quantiles.clone(), e.flag))
            .collect(),
        csv: io::summary_csv(&s),
        failed_chains: store.failures().iter().map(|c| c.index).collect(),
    })
}

/// 1 - ‖y - ŷ‖² / ‖y‖² over entries not excluded by the mask.
#[pyfunction]
#[pyo3(signature = (y, yhat, mask=None))]
fn r_squared(y: &Tensor, yhat: &Tensor, mask: Option<&Tensor>) -> PyResult<f64> {
    let mask = mask
        .map(|m| tenreg::Mask::new(m.inner.dims().to_vec(), m.inner.data().iter().map(|&v| v != 0.0).collect()))
        .transpose()
        .map_err(err)?;
    tenreg::r_squared(&y.inner, &yhat.inner, mask.as_ref()).map_err(err)
}

/// Correlation matrix of the mode-k residual rows and its eigenvalues (descending).
#[pyfunction]
fn residual_correlation(residual: &Tensor, mode: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = tenreg::mode_residual_correlation(&residual.inner, mode).map_err(err)?;
    Ok((from_matrix(&d.correlation), d.eigenvalues))
}

#[pyfunction]
fn kronecker(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(from_matrix(&tenreg::kronecker(&to_matrix(a)?, &to_matrix(b)?)))
}

#[pymodule(name = "tenreg")]
pub fn tenreg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Factors>()?;
    m.add_class::<AlsResult>()?;
    m.add_class::<GlsResult>()?;
    m.add_class::<PosteriorSummary>()?;
    m.add_function(wrap_pyfunction!(fit_als, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gls, m)?)?;
    m.add_function(wrap_pyfunction!(gibbs, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared, m)?)?;
    m.add_function(wrap_pyfunction!(residual_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(kronecker, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
