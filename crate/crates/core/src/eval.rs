//! R², split plans and cross-validated model comparison.

use std::sync::Arc;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::als::{fit_als_with_fixed, predict, AlsOptions, Init, Mask, RegressionDataset};
use crate::baselines::{fit_additive, fit_rank_one_per_dyad};
use crate::error::{Error, Result};
use crate::features::demean;
use crate::rng::{child_seed, stream_rng};
use crate::tensor::{KroneckerFactorSet, Tensor};

/// `1 - SS_res / SS_tot` over unmasked entries, with `SS_tot = Σ y²` (the
/// outcome is taken to be centered, so the zero predictor scores 0).
pub fn r_squared(y: &Tensor, yhat: &Tensor, mask: Option<&Mask>) -> Result<f64> {
    if y.dims() != yhat.dims() {
        return Err(Error::Shape(format!("Y {:?} vs prediction {:?}", y.dims(), yhat.dims())));
    }
    if let Some(m) = mask {
        if m.dims() != y.dims() {
            return Err(Error::Shape(format!("mask {:?} vs Y {:?}", m.dims(), y.dims())));
        }
    }
    let (mut res, mut tot) = (0.0, 0.0);
    for (i, (a, b)) in y.data().iter().zip(yhat.data()).enumerate() {
        if mask.is_some_and(|m| m.is_excluded(i)) {
            continue;
        }
        res += (a - b) * (a - b);
        tot += a * a;
    }
    if tot == 0.0 {
        return Err(Error::ZeroVariation);
    }
    Ok(1.0 - res / tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Test sets partition a subset of the replications.
    Disjoint,
    /// Each fold draws its test set without replacement, independently of the others.
    Independent,
    /// Each fold tests on a contiguous run of replications at a random start.
    Blocked,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Self::Disjoint),
            "independent" => Ok(Self::Independent),
            "blocked" => Ok(Self::Blocked),
            _ => Err(Error::InvalidArgument(format!("unknown split mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub test_size: usize,
    pub seed: u64,
    pub mode: SplitMode,
    /// Sorted test indices per fold.
    pub folds: Vec<Vec<usize>>,
}

impl SplitPlan {
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let test = &self.folds[fold];
        (0..self.n).filter(|i| test.binary_search(i).is_err()).collect()
    }
}

pub fn make_splits(n: usize, folds: usize, test_size: usize, seed: u64, mode: SplitMode) -> Result<SplitPlan> {
    if folds == 0 || test_size == 0 || test_size >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot make {folds} folds of {test_size} test items from {n} replications"
        )));
    }
    if mode == SplitMode::Disjoint && folds * test_size > n {
        return Err(Error::InvalidArgument(format!(
            "{folds} disjoint folds of {test_size} need {} replications, have {n}",
            folds * test_size
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::with_capacity(folds);
    match mode {
        SplitMode::Disjoint => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for f in 0..folds {
                let mut t = perm[f * test_size..(f + 1) * test_size].to_vec();
                t.sort_unstable();
                out.push(t);
            }
        }
        SplitMode::Independent => {
            for _ in 0..folds {
                let mut t = index::sample(&mut rng, n, test_size).into_vec();
                t.sort_unstable();
                out.push(t);
            }
        }
        SplitMode::Blocked => {
            for _ in 0..folds {
                let start = rng.random_range(0..=n - test_size);
                out.push((start..start + test_size).collect());
            }
        }
    }
    Ok(SplitPlan { n, test_size, seed, mode, folds: out })
}

pub trait Predictor: Send + Sync {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

pub trait Fitter: Send + Sync {
    fn fit(&self, train: &RegressionDataset) -> Result<Box<dyn Predictor>>;
}

impl Predictor for KroneckerFactorSet {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        predict(self, x)
    }
}

impl Predictor for crate::baselines::AdditiveFit {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        crate::baselines::AdditiveFit::predict(self, x)
    }
}

impl Predictor for crate::baselines::RankOneFits {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        crate::baselines::RankOneFits::predict(self, x)
    }
}

/// Shared multiplicative model fit by alternating least squares.
#[derive(Debug, Clone, Default)]
pub struct Multiplicative {
    pub opts: AlsOptions,
    pub seed: u64,
    pub fixed_modes: Vec<usize>,
}

impl Fitter for Multiplicative {
    fn fit(&self, train: &RegressionDataset) -> Result<Box<dyn Predictor>> {
        let rep = fit_als_with_fixed(train, &Init::Random { seed: self.seed }, &self.fixed_modes, &self.opts)?;
        Ok(Box::new(rep.factors))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Additive;

impl Fitter for Additive {
    fn fit(&self, train: &RegressionDataset) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(fit_additive(train)?))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RankOnePerDyad {
    pub opts: AlsOptions,
    pub seed: u64,
}

impl Fitter for RankOnePerDyad {
    fn fit(&self, train: &RegressionDataset) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(fit_rank_one_per_dyad(train, self.seed, &self.opts)?))
    }
}

/// Always predicts zero.
#[derive(Debug, Clone, Default)]
pub struct Zero;

struct ZeroPredictor {
    out: Vec<usize>,
}

impl Predictor for ZeroPredictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut d = self.out.clone();
        d.push(*x.dims().last().unwrap());
        Ok(Tensor::zeros(&d))
    }
}

impl Fitter for Zero {
    fn fit(&self, train: &RegressionDataset) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(ZeroPredictor { out: train.output_dims().to_vec() }))
    }
}

/// Ignores the training data and predicts with the given factors.
#[derive(Debug, Clone)]
pub struct FixedFactors(pub KroneckerFactorSet);

impl Fitter for FixedFactors {
    fn fit(&self, _train: &RegressionDataset) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(self.0.clone()))
    }
}

/// Drops mode `k` of a tensor after selecting index `j` along it.
fn take(t: &Tensor, k: usize, j: usize) -> Result<Tensor> {
    let s = t.select(k, &[j])?;
    let mut d = t.dims().to_vec();
    d.remove(k);
    s.reshape(d)
}

/// Fits an independent model to each slice of the outcome along `y_mode`.
/// With `x_mode` set, slice `j` of the outcome only sees slice `j` of the
/// predictors along that mode.
pub struct SeparateByMode {
    pub y_mode: usize,
    pub x_mode: Option<usize>,
    pub inner: Box<dyn Fitter>,
}

struct SeparatePredictor {
    y_mode: usize,
    x_mode: Option<usize>,
    parts: Vec<Box<dyn Predictor>>,
}

impl Predictor for SeparatePredictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut outs = Vec::with_capacity(self.parts.len());
        for (j, p) in self.parts.iter().enumerate() {
            let xj = match self.x_mode {
                Some(k) => take(x, k, j)?,
                None => x.clone(),
            };
            let yj = p.predict(&xj)?;
            let mut d = yj.dims().to_vec();
            d.insert(self.y_mode, 1);
            outs.push(yj.reshape(d)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        Tensor::concat(&refs, self.y_mode)
    }
}

impl Fitter for SeparateByMode {
    fn fit(&self, train: &RegressionDataset) -> Result<Box<dyn Predictor>> {
        let r = train.replication_mode();
        if self.y_mode >= r || self.x_mode.is_some_and(|k| k >= r) {
            return Err(Error::ModeOutOfRange { mode: self.y_mode, order: r });
        }
        let count = train.y().dims()[self.y_mode];
        if let Some(k) = self.x_mode {
            if train.x().dims()[k] != count {
                return Err(Error::Shape(format!(
                    "outcome mode {} has {count} slices, predictor mode {k} has {}",
                    self.y_mode,
                    train.x().dims()[k]
                )));
            }
        }
        let mut parts = Vec::with_capacity(count);
        for j in 0..count {
            let x = match self.x_mode {
                Some(k) => take(train.x(), k, j)?,
                None => train.x().clone(),
            };
            let y = take(train.y(), self.y_mode, j)?;
            let mask = match train.mask() {
                Some(m) => {
                    let w = take(&m.weights(), self.y_mode, j)?;
                    Some(Mask::new(w.dims().to_vec(), w.data().iter().map(|&v| v == 0.0).collect())?)
                }
                None => None,
            };
            parts.push(self.inner.fit(&RegressionDataset::new(x, y, mask)?)?);
        }
        Ok(Box::new(SeparatePredictor { y_mode: self.y_mode, x_mode: self.x_mode, parts }))
    }
}

/// One model to score, with the dataset it sees (models may use different predictors).
pub struct CvEntry {
    pub name: String,
    pub fitter: Box<dyn Fitter>,
    pub data: Arc<RegressionDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemeanMode {
    /// Series means from the training replications, applied to both sides.
    Train,
    /// Series means from all replications.
    Full,
    Off,
}

impl std::str::FromStr for DemeanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "full" => Ok(Self::Full),
            "off" => Ok(Self::Off),
            _ => Err(Error::InvalidArgument(format!("unknown demean mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub demean: DemeanMode,
    /// Outcome mode indexing action types; adds per-type scores.
    pub type_mode: Option<usize>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { demean: DemeanMode::Train, type_mode: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub model: String,
    pub fold: usize,
    /// `None` for the overall score.
    pub type_index: Option<usize>,
    pub r2: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub model: String,
    pub type_index: Option<usize>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub summaries: Vec<ScoreSummary>,
}

impl ScoreTable {
    pub fn summary(&self, model: &str, type_index: Option<usize>) -> Option<&ScoreSummary> {
        self.summaries.iter().find(|s| s.model == model && s.type_index == type_index)
    }

    pub fn mean(&self, model: &str) -> Option<f64> {
        self.summary(model, None).map(|s| s.mean)
    }
}

fn series_means(t: &Tensor, idx: &[usize]) -> Vec<f64> {
    let n = *t.dims().last().unwrap();
    let stride = t.len() / n;
    (0..stride).map(|s| idx.iter().map(|&r| t.data()[s + stride * r]).sum::<f64>() / idx.len() as f64).collect()
}

fn subtract_means(t: &Tensor, means: &[f64]) -> Tensor {
    let stride = means.len();
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v -= means[i % stride];
    }
    out
}

fn fold_data(data: &RegressionDataset, plan: &SplitPlan, fold: usize, mode: DemeanMode) -> Result<(RegressionDataset, RegressionDataset)> {
    let train_idx = plan.train_indices(fold);
    let test_idx = &plan.folds[fold];
    let train = data.select_replications(&train_idx)?;
    let test = data.select_replications(test_idx)?;
    let ref_idx: Vec<usize> = match mode {
        DemeanMode::Off => return Ok((train, test)),
        DemeanMode::Train => train_idx,
        DemeanMode::Full => (0..data.n()).collect(),
    };
    let mx = series_means(data.x(), &ref_idx);
    let my = series_means(data.y(), &ref_idx);
    let adj = |d: &RegressionDataset| {
        RegressionDataset::new(subtract_means(d.x(), &mx), subtract_means(d.y(), &my), d.mask().cloned())
    };
    Ok((adj(&train)?, adj(&test)?))
}

fn score_fold(entry: &CvEntry, plan: &SplitPlan, fold: usize, opts: &CvOptions) -> Vec<ScoreRow> {
    let row = |type_index, r2, error| ScoreRow { model: entry.name.clone(), fold, type_index, r2, error };
    let run = || -> Result<Vec<(Option<usize>, Result<f64>)>> {
        let (train, test) = fold_data(&entry.data, plan, fold, opts.demean)?;
        let model = entry.fitter.fit(&train)?;
        let yhat = model.predict(test.x())?;
        let mut out = vec![(None, r_squared(test.y(), &yhat, test.mask()))];
        if let Some(k) = opts.type_mode {
            for j in 0..test.y().dims()[k] {
                let y = test.y().select(k, &[j])?;
                let p = yhat.select(k, &[j])?;
                let m = test.mask().map(|m| m.select(k, &[j])).transpose()?;
                out.push((Some(j), r_squared(&y, &p, m.as_ref())));
            }
        }
        Ok(out)
    };
    match run() {
        Ok(scores) => scores
            .into_iter()
            .map(|(t, r)| match r {
                Ok(v) => row(t, Some(v), None),
                Err(e) => row(t, None, Some(e.to_string())),
            })
            .collect(),
        Err(e) => {
            warn!("model {} failed on fold {fold}: {e}", entry.name);
            vec![row(None, None, Some(e.to_string()))]
        }
    }
}

/// Fits every model on every fold (in parallel) and scores predictive R² on
/// the held-out replications. Failed folds are recorded and left out of the
/// model's summary.
pub fn cross_validate(entries: &[CvEntry], plan: &SplitPlan, opts: &CvOptions) -> Result<ScoreTable> {
    for e in entries {
        if e.data.n() != plan.n {
            return Err(Error::Shape(format!(
                "model {} has {} replications, plan expects {}",
                e.name,
                e.data.n(),
                plan.n
            )));
        }
    }
    let jobs: Vec<(usize, usize)> =
        (0..entries.len()).flat_map(|m| (0..plan.folds.len()).map(move |f| (m, f))).collect();
    let rows: Vec<ScoreRow> = jobs
        .par_iter()
        .map(|&(m, f)| score_fold(&entries[m], plan, f, opts))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let mut summaries = Vec::new();
    for e in entries {
        let mut keys: Vec<Option<usize>> = vec![None];
        if let (Some(k), true) = (opts.type_mode, e.data.modes() > 0) {
            keys.extend((0..e.data.y().dims()[k]).map(Some));
        }
        for key in keys {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == e.name && r.type_index == key)
                .filter_map(|r| r.r2)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            summaries.push(ScoreSummary { model: e.name.clone(), type_index: key, mean, min, max, folds: vals.len() });
        }
    }
    Ok(ScoreTable { rows, summaries })
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub cv: ScoreTable,
    /// `(model, in-sample R²)`.
    pub in_sample: Vec<(String, f64)>,
}

/// Multiplicative, additive and per-dyad rank-one models on a `K = 2`
/// relational dataset: cross-validated and in-sample R².
pub fn compare_additive_multiplicative(
    data: &RegressionDataset,
    plan: &SplitPlan,
    seed: u64,
    opts: &CvOptions,
) -> Result<Comparison> {
    let data = Arc::new(data.clone());
    let als = AlsOptions::default();
    let entries = vec![
        CvEntry {
            name: "multiplicative".into(),
            fitter: Box::new(Multiplicative { opts: als.clone(), seed: child_seed(seed, 1), fixed_modes: vec![] }),
            data: data.clone(),
        },
        CvEntry { name: "additive".into(), fitter: Box::new(Additive), data: data.clone() },
        CvEntry {
            name: "rank-one-per-dyad".into(),
            fitter: Box::new(RankOnePerDyad { opts: als, seed: child_seed(seed, 2) }),
            data: data.clone(),
        },
    ];
    let cv = cross_validate(&entries, plan, opts)?;
    let full = match opts.demean {
        DemeanMode::Off => (*data).clone(),
        _ => RegressionDataset::new(demean(data.x()), demean(data.y()), data.mask().cloned())?,
    };
    let mut in_sample = Vec::new();
    for e in &entries {
        let model = e.fitter.fit(&full)?;
        let r2 = r_squared(full.y(), &model.predict(full.x())?, full.mask())?;
        in_sample.push((e.name.clone(), r2));
    }
    Ok(Comparison { cv, in_sample })
}
