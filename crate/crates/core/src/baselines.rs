//! Comparison models for relational panels with `K = 2`: the additive
//! row/column model and independent rank-one bilinear fits per dyad.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::als::{AlsOptions, RegressionDataset};
use crate::error::{Error, Result};
use crate::linalg::{solve_right_gram, sym_eigen_desc, symmetrize};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

fn require_pairwise(data: &RegressionDataset) -> Result<()> {
    if data.modes() != 2 {
        return Err(Error::Shape(format!(
            "relational baseline needs K = 2 slices, got {} modes",
            data.modes()
        )));
    }
    Ok(())
}

/// Row sums (`p1 x n`) and column sums (`p2 x n`) of every predictor slice.
fn margins(x: &Tensor) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p1, p2, n) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut r = DMatrix::zeros(p1, n);
    let mut c = DMatrix::zeros(p2, n);
    let d = x.data();
    for t in 0..n {
        for j2 in 0..p2 {
            for j1 in 0..p1 {
                let v = d[j1 + p1 * (j2 + p2 * t)];
                r[(j1, t)] += v;
                c[(j2, t)] += v;
            }
        }
    }
    (r, c)
}

/// `Y_t = A X_t 1 1ᵀ + 1 1ᵀ X_t Bᵀ + E_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveFit {
    /// `m1 x p1` row-effect coefficients.
    pub a: DMatrix<f64>,
    /// `m2 x p2` column-effect coefficients; entries sum to zero.
    pub b: DMatrix<f64>,
}

impl AdditiveFit {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.order() != 3 || x.dims()[0] != self.a.ncols() || x.dims()[1] != self.b.ncols() {
            return Err(Error::Shape(format!(
                "additive model expects {}x{}xn predictors, got {:?}",
                self.a.ncols(),
                self.b.ncols(),
                x.dims()
            )));
        }
        let (r, c) = margins(x);
        let ra = &self.a * r;
        let cb = &self.b * c;
        let (m1, m2, n) = (self.a.nrows(), self.b.nrows(), x.dims()[2]);
        Ok(Tensor::from_fn(&[m1, m2, n], |i| ra[(i[0], i[2])] + cb[(i[1], i[2])]))
    }
}

/// Ordinary least squares for the additive model. The level shift
/// `A + α11ᵀ, B − α11ᵀ` is pinned by requiring the entries of `B` to sum to
/// zero; remaining rank deficiency is resolved by the minimum-norm solution.
pub fn fit_additive(data: &RegressionDataset) -> Result<AdditiveFit> {
    require_pairwise(data)?;
    let (m1, m2) = (data.output_dims()[0], data.output_dims()[1]);
    let (p1, p2) = (data.input_dims()[0], data.input_dims()[1]);
    let n = data.n();
    let (r, c) = margins(data.x());
    let w = data.mask().map(|m| m.weights());
    let weight = |i1: usize, i2: usize, t: usize| -> f64 {
        w.as_ref().map_or(1.0, |w| w.data()[i1 + m1 * (i2 + m2 * t)])
    };
    let y = data.y().data();

    let na = m1 * p1;
    let dim = na + m2 * p2;
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    // Observation counts per (row, t) and (column, t), and weighted outcome sums.
    let mut row_w = DMatrix::<f64>::zeros(m1, n);
    let mut col_w = DMatrix::<f64>::zeros(m2, n);
    let mut row_y = DMatrix::<f64>::zeros(m1, n);
    let mut col_y = DMatrix::<f64>::zeros(m2, n);
    for t in 0..n {
        for i2 in 0..m2 {
            for i1 in 0..m1 {
                let wt = weight(i1, i2, t);
                let v = wt * y[i1 + m1 * (i2 + m2 * t)];
                row_w[(i1, t)] += wt;
                col_w[(i2, t)] += wt;
                row_y[(i1, t)] += v;
                col_y[(i2, t)] += v;
            }
        }
    }
    for i1 in 0..m1 {
        let rw = DMatrix::from_fn(p1, n, |j, t| r[(j, t)] * row_w[(i1, t)]);
        g.view_mut((i1 * p1, i1 * p1), (p1, p1)).copy_from(&(&rw * r.transpose()));
        rhs.rows_mut(i1 * p1, p1).copy_from(&(&r * row_y.row(i1).transpose()));
    }
    for i2 in 0..m2 {
        let cw = DMatrix::from_fn(p2, n, |j, t| c[(j, t)] * col_w[(i2, t)]);
        let o = na + i2 * p2;
        g.view_mut((o, o), (p2, p2)).copy_from(&(&cw * c.transpose()));
        rhs.rows_mut(o, p2).copy_from(&(&c * col_y.row(i2).transpose()));
    }
    let cross: Vec<((usize, usize), DMatrix<f64>)> = (0..m1 * m2)
        .into_par_iter()
        .map(|idx| {
            let (i1, i2) = (idx % m1, idx / m1);
            let rw = DMatrix::from_fn(p1, n, |j, t| r[(j, t)] * weight(i1, i2, t));
            ((i1, i2), rw * c.transpose())
        })
        .collect();
    for ((i1, i2), blk) in cross {
        let o = na + i2 * p2;
        g.view_mut((i1 * p1, o), (p1, p2)).copy_from(&blk);
        g.view_mut((o, i1 * p1), (p2, p1)).copy_from(&blk.transpose());
    }

    // Penalizing (Σ b)² leaves the fit unchanged and selects the zero-sum gauge.
    let scale = g.trace() / dim as f64;
    let pen = if scale > 0.0 { scale } else { 1.0 };
    for i in na..dim {
        for j in na..dim {
            g[(i, j)] += pen;
        }
    }
    let theta = match g.clone().cholesky() {
        Some(ch) if ch.l_dirty().diagonal().iter().all(|&v| v > 1e-10 * pen.sqrt()) => ch.solve(&rhs),
        _ => {
            warn!("additive design is rank deficient; using the minimum-norm solution");
            pseudo_solve(&g, &rhs)
        }
    };
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular { mode: 0 });
    }
    let a = DMatrix::from_fn(m1, p1, |i, j| theta[i * p1 + j]);
    let b = DMatrix::from_fn(m2, p2, |i, j| theta[na + i * p2 + j]);
    Ok(AdditiveFit { a, b })
}

fn pseudo_solve(g: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let (vals, vecs) = sym_eigen_desc(&symmetrize(g));
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let cut = top * 1e-10 * vals.len() as f64;
    let mut out = DVector::zeros(rhs.len());
    for (j, &v) in vals.iter().enumerate() {
        if v > cut && v > 0.0 {
            let q = vecs.column(j);
            out += q * (q.dot(rhs) / v);
        }
    }
    out
}

/// Independent bilinear fits `y_{i1,i2,t} = c_{i1,i2}ᵀ X_t d_{i1,i2}`.
#[derive(Debug, Clone)]
pub struct RankOneFits {
    pub m1: usize,
    pub m2: usize,
    /// Indexed by `i1 + m1 * i2`.
    pub c: Vec<DVector<f64>>,
    pub d: Vec<DVector<f64>>,
    pub rss: Vec<f64>,
    /// Dyads whose fit failed; their coefficients are zero.
    pub failures: Vec<((usize, usize), String)>,
}

impl RankOneFits {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (p1, p2) = (self.c[0].len(), self.d[0].len());
        if x.order() != 3 || x.dims()[0] != p1 || x.dims()[1] != p2 {
            return Err(Error::Shape(format!(
                "per-dyad model expects {p1}x{p2}xn predictors, got {:?}",
                x.dims()
            )));
        }
        let n = x.dims()[2];
        let mut out = Tensor::zeros(&[self.m1, self.m2, n]);
        for t in 0..n {
            let xt = DMatrix::from_column_slice(p1, p2, &x.data()[p1 * p2 * t..p1 * p2 * (t + 1)]);
            for dy in 0..self.m1 * self.m2 {
                let v = self.c[dy].dot(&(&xt * &self.d[dy]));
                out.data_mut()[dy + self.m1 * self.m2 * t] = v;
            }
        }
        Ok(out)
    }

    pub fn total_rss(&self) -> f64 {
        self.rss.iter().sum()
    }
}

struct DyadFit {
    c: DVector<f64>,
    d: DVector<f64>,
    rss: f64,
}

fn fit_one_dyad(
    slices: &[DMatrix<f64>],
    y: &[f64],
    seed: u64,
    stream: u64,
    opts: &AlsOptions,
) -> Result<DyadFit> {
    let (p1, p2) = (slices[0].nrows(), slices[0].ncols());
    let mut rng = stream_rng(seed, stream);
    let mut draw = |len: usize| {
        let v = DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nv = v.norm();
        v / nv
    };
    let mut c = draw(p1);
    let mut d = draw(p2);
    let rss_of = |c: &DVector<f64>, d: &DVector<f64>| -> f64 {
        slices.iter().zip(y).map(|(x, &v)| (v - c.dot(&(x * d))).powi(2)).sum()
    };
    let floor = f64::EPSILON * f64::EPSILON * y.iter().map(|v| v * v).sum::<f64>();
    let mut prev = rss_of(&c, &d);
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        // Each block is a vector regression: y_t ≈ cᵀ (X_t d), then y_t ≈ (X_tᵀ c)ᵀ d.
        let zs: Vec<DVector<f64>> = slices.iter().map(|x| x * &d).collect();
        let nc = vector_ls(&zs, y, opts.ridge, 0)?;
        let zs: Vec<DVector<f64>> = slices.iter().map(|x| x.tr_mul(&nc)).collect();
        let nd = vector_ls(&zs, y, opts.ridge, 1)?;
        let rss = rss_of(&nc, &nd);
        if !rss.is_finite() {
            return Err(Error::Divergence { sweep: sweeps });
        }
        if rss > prev {
            break;
        }
        c = nc;
        d = nd;
        let done = prev - rss <= opts.tol * prev || rss <= floor;
        prev = rss;
        if done {
            break;
        }
    }
    let (nc, nd) = (c.norm(), d.norm());
    if nc > 0.0 && nd > 0.0 {
        let g = (nc * nd).sqrt();
        c *= g / nc;
        d *= g / nd;
    }
    Ok(DyadFit { c, d, rss: prev })
}

fn vector_ls(z: &[DVector<f64>], y: &[f64], ridge: f64, mode: usize) -> Result<DVector<f64>> {
    let p = z[0].len();
    let mut g = DMatrix::zeros(p, p);
    let mut cross = DMatrix::zeros(1, p);
    for (zt, &v) in z.iter().zip(y) {
        g.ger(1.0, zt, zt, 1.0);
        cross += zt.transpose() * v;
    }
    Ok(solve_right_gram(&cross, &g, ridge, mode)?.row(0).transpose())
}

/// Fits every ordered dyad separately (in parallel). Dyads excluded by the
/// mask at every time point, and dyads whose fit fails, get zero coefficients.
pub fn fit_rank_one_per_dyad(
    data: &RegressionDataset,
    seed: u64,
    opts: &AlsOptions,
) -> Result<RankOneFits> {
    require_pairwise(data)?;
    opts.validate()?;
    let (m1, m2) = (data.output_dims()[0], data.output_dims()[1]);
    let (p1, p2) = (data.input_dims()[0], data.input_dims()[1]);
    let n = data.n();
    let slices: Vec<DMatrix<f64>> = (0..n)
        .map(|t| DMatrix::from_column_slice(p1, p2, &data.x().data()[p1 * p2 * t..p1 * p2 * (t + 1)]))
        .collect();
    let mask = data.mask();
    let results: Vec<Result<DyadFit>> = (0..m1 * m2)
        .into_par_iter()
        .map(|dy| {
            let keep: Vec<usize> =
                (0..n).filter(|&t| !mask.is_some_and(|m| m.is_excluded(dy + m1 * m2 * t))).collect();
            if keep.is_empty() {
                return Ok(DyadFit { c: DVector::zeros(p1), d: DVector::zeros(p2), rss: 0.0 });
            }
            let xs: Vec<DMatrix<f64>> = keep.iter().map(|&t| slices[t].clone()).collect();
            let ys: Vec<f64> = keep.iter().map(|&t| data.y().data()[dy + m1 * m2 * t]).collect();
            fit_one_dyad(&xs, &ys, seed, dy as u64, opts)
        })
        .collect();
    let mut out = RankOneFits { m1, m2, c: Vec::new(), d: Vec::new(), rss: Vec::new(), failures: Vec::new() };
    for (dy, r) in results.into_iter().enumerate() {
        match r {
            Ok(f) => {
                out.c.push(f.c);
                out.d.push(f.d);
                out.rss.push(f.rss);
            }
            Err(e) => {
                warn!("dyad ({}, {}) failed: {e}", dy % m1, dy / m1);
                out.c.push(DVector::zeros(p1));
                out.d.push(DVector::zeros(p2));
                let ys = (0..n).map(|t| data.y().data()[dy + m1 * m2 * t].powi(2)).sum();
                out.rss.push(ys);
                out.failures.push(((dy % m1, dy / m1), e.to_string()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::als::{fit_als, predict, Init};
    use crate::tensor::KroneckerFactorSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.sample(StandardNormal))
    }

    fn mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn ssq(t: &Tensor) -> f64 {
        t.frobenius_norm_sq()
    }

    #[test]
    fn additive_exact_on_additive_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&[4, 4, 60], &mut rng);
        let a = mat(4, 4, &mut rng);
        let mut b = mat(4, 4, &mut rng);
        b.add_scalar_mut(-b.mean());
        let truth = AdditiveFit { a, b };
        let y = truth.predict(&x).unwrap();
        let data = RegressionDataset::new(x.clone(), y.clone(), None).unwrap();
        let fit = fit_additive(&data).unwrap();
        let resid = y.sub(&fit.predict(&x).unwrap()).unwrap();
        assert!(ssq(&resid) < 1e-18 * ssq(&y));
        assert!(fit.b.sum().abs() < 1e-9);
        assert!((&fit.a - &truth.a).amax() < 1e-8);
    }

    #[test]
    fn additive_zero_design_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = gaussian(&[3, 3, 10], &mut rng);
        let data = RegressionDataset::new(Tensor::zeros(&[3, 3, 10]), y, None).unwrap();
        let fit = fit_additive(&data).unwrap();
        assert_eq!(fit.a.amax(), 0.0);
        assert_eq!(fit.b.amax(), 0.0);
    }

    #[test]
    fn additive_respects_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(&[3, 3, 40], &mut rng);
        let truth = AdditiveFit { a: mat(3, 3, &mut rng), b: DMatrix::zeros(3, 3) };
        let mut y = truth.predict(&x).unwrap();
        let mask = crate::als::Mask::diagonal(&[3, 3, 40], 0, 1);
        for t in 0..40 {
            for i in 0..3 {
                y.set(&[i, i, t], 1e6);
            }
        }
        let data = RegressionDataset::new(x, y, Some(mask)).unwrap();
        let fit = fit_additive(&data).unwrap();
        assert!((&fit.a - &truth.a).amax() < 1e-8);
    }

    #[test]
    fn per_dyad_nests_shared_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(&[3, 3, 30], &mut rng);
        let f = KroneckerFactorSet::from_matrices(vec![mat(3, 3, &mut rng), mat(3, 3, &mut rng)]).unwrap();
        let y = predict(&f, &x).unwrap().add(&gaussian(&[3, 3, 30], &mut rng)).unwrap();
        let data = RegressionDataset::new(x.clone(), y.clone(), None).unwrap();
        let shared = fit_als(&data, &Init::Random { seed: 1 }, &AlsOptions::default()).unwrap();
        let per = fit_rank_one_per_dyad(&data, 1, &AlsOptions::default()).unwrap();
        assert!(per.failures.is_empty());
        let pr = ssq(&y.sub(&per.predict(&x).unwrap()).unwrap());
        assert!((pr - per.total_rss()).abs() < 1e-8 * pr);
        assert!(pr <= shared.final_rss());
    }

    #[test]
    fn single_dyad_matches_shared_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(&[3, 2, 40], &mut rng);
        let f = KroneckerFactorSet::from_matrices(vec![mat(1, 3, &mut rng), mat(1, 2, &mut rng)]).unwrap();
        let y = predict(&f, &x).unwrap().add(&gaussian(&[1, 1, 40], &mut rng).scale(0.1)).unwrap();
        let data = RegressionDataset::new(x.clone(), y, None).unwrap();
        let opts = AlsOptions { tol: 1e-12, ..Default::default() };
        let shared = fit_als(&data, &Init::Random { seed: 9 }, &opts).unwrap();
        let per = fit_rank_one_per_dyad(&data, 9, &opts).unwrap();
        let a = predict(&shared.factors, &x).unwrap();
        let b = per.predict(&x).unwrap();
        assert!(ssq(&a.sub(&b).unwrap()) < 1e-12 * ssq(&a));
    }

    #[test]
    fn baselines_reject_other_orders() {
        let data = RegressionDataset::new(Tensor::zeros(&[2, 5]), Tensor::zeros(&[2, 5]), None).unwrap();
        assert!(matches!(fit_additive(&data), Err(Error::Shape(_))));
        assert!(fit_rank_one_per_dyad(&data, 0, &AlsOptions::default()).is_err());
    }
}
