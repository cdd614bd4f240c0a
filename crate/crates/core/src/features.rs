//! Dyadic event panels and the predictor tensors built from them.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::als::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Event counts `m x m x J x T` (source, target, type, period).
#[derive(Debug, Clone, PartialEq)]
pub struct EventPanel {
    pub nodes: Vec<String>,
    pub types: Vec<String>,
    pub periods: Vec<String>,
    pub counts: Tensor,
    /// When false, self-relations are excluded everywhere downstream.
    pub diagonal_defined: bool,
}

/// Explicit label orders; any list given must name every label that occurs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelOrdering {
    #[serde(default)]
    pub nodes: Option<Vec<String>>,
    #[serde(default)]
    pub types: Option<Vec<String>>,
    #[serde(default)]
    pub periods: Option<Vec<String>>,
}

const COLUMNS: [&str; 5] = ["source", "target", "type", "period", "count"];

/// Sorted labels: numerically when every label is an integer, otherwise lexicographically.
fn default_order(labels: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = labels.into_iter().collect();
    v.sort();
    v.dedup();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    v
}

fn apply_order(found: &[String], given: Option<&Vec<String>>, what: &str) -> Result<Vec<String>> {
    let Some(order) = given else {
        return Ok(found.to_vec());
    };
    let mut seen = std::collections::HashSet::new();
    for l in order {
        if !seen.insert(l) {
            return Err(Error::Parse { line: 0, msg: format!("{what} ordering lists '{l}' twice") });
        }
    }
    if let Some(missing) = found.iter().find(|l| !seen.contains(l)) {
        return Err(Error::Parse { line: 0, msg: format!("{what} ordering does not list '{missing}'") });
    }
    Ok(order.clone())
}

/// Reads rows `source,target,type,period,count` into a dense panel. Cells
/// with no row are zero; repeated cells are summed.
pub fn ingest_events<R: Read>(
    reader: R,
    ordering: Option<&LabelOrdering>,
    diagonal_defined: bool,
) -> Result<EventPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let mut pos = [usize::MAX; 5];
    for (i, h) in headers.iter().enumerate() {
        match COLUMNS.iter().position(|c| *c == h) {
            Some(j) if pos[j] == usize::MAX => pos[j] = i,
            Some(_) => return Err(Error::Parse { line: 1, msg: format!("duplicate column '{h}'") }),
            None => return Err(Error::Parse { line: 1, msg: format!("unknown column '{h}'") }),
        }
    }
    if let Some(j) = pos.iter().position(|&p| p == usize::MAX) {
        return Err(Error::Parse { line: 1, msg: format!("missing column '{}'", COLUMNS[j]) });
    }

    let mut cells: BTreeMap<(String, String, String, String), u64> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let field = |j: usize| rec.get(pos[j]).unwrap_or("").to_string();
        let raw = field(4);
        let count: u64 = raw.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("count '{raw}' is not a nonnegative integer"),
        })?;
        let key = (field(0), field(1), field(2), field(3));
        if key.0.is_empty() || key.1.is_empty() || key.2.is_empty() || key.3.is_empty() {
            return Err(Error::Parse { line, msg: "empty label".into() });
        }
        if let Some(prev) = cells.get_mut(&key) {
            warn!("line {line}: repeated cell {key:?}; counts summed");
            *prev += count;
        } else {
            cells.insert(key, count);
        }
    }
    if cells.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no events: the panel has no nodes".into() });
    }

    let nodes = default_order(cells.keys().flat_map(|k| [k.0.clone(), k.1.clone()]));
    let types = default_order(cells.keys().map(|k| k.2.clone()));
    let periods = default_order(cells.keys().map(|k| k.3.clone()));
    let nodes = apply_order(&nodes, ordering.and_then(|o| o.nodes.as_ref()), "node")?;
    let types = apply_order(&types, ordering.and_then(|o| o.types.as_ref()), "type")?;
    let periods = apply_order(&periods, ordering.and_then(|o| o.periods.as_ref()), "period")?;

    let index = |v: &[String]| -> HashMap<String, usize> { v.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect() };
    let (ni, ti, pi) = (index(&nodes), index(&types), index(&periods));
    let dims = [nodes.len(), nodes.len(), types.len(), periods.len()];
    let mut counts = Tensor::zeros(&dims);
    for ((s, t, ty, p), c) in cells {
        if s == t && !diagonal_defined {
            warn!("self-relation {s} -> {s} is ignored because the diagonal is undefined");
        }
        counts.set(&[ni[&s], ni[&t], ti[&ty], pi[&p]], c as f64);
    }
    Ok(EventPanel { nodes, types, periods, counts, diagonal_defined })
}

/// Normal scores `Φ^{-1}(r / (n + 1))` with `r` the average rank.
pub fn quantile_transform(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| series[a].total_cmp(&series[b]));
    let normal = Normal::standard();
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && series[order[j + 1]] == series[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let rank = (i + j + 2) as f64 / 2.0;
        let z = normal.inverse_cdf(rank / (n as f64 + 1.0));
        for &o in &order[i..=j] {
            out[o] = z;
        }
        i = j + 1;
    }
    out
}

/// Applies `f` to every series along the last mode.
fn map_series(t: &Tensor, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Tensor {
    let n = *t.dims().last().unwrap();
    let stride = t.len() / n;
    let mut out = t.clone();
    let mut buf = vec![0.0; n];
    for s in 0..stride {
        for (r, b) in buf.iter_mut().enumerate() {
            *b = t.data()[s + stride * r];
        }
        for (r, v) in f(&buf).into_iter().enumerate() {
            out.data_mut()[s + stride * r] = v;
        }
    }
    out
}

/// Quantile-transforms each series along the last mode.
pub fn quantile_transform_series(t: &Tensor) -> Tensor {
    map_series(t, quantile_transform)
}

/// Subtracts the time mean of each series along the last mode.
pub fn demean(t: &Tensor) -> Tensor {
    map_series(t, |s| {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| v - mean).collect()
    })
}

/// `(X, Y')` with `X_t = Y_{t-1}`; both have `T - 1` slices.
pub fn build_lag1(y: &Tensor) -> Result<(Tensor, Tensor)> {
    let r = y.order() - 1;
    let t = y.dims()[r];
    if t < 2 {
        return Err(Error::InvalidArgument(format!("lagging needs at least 2 periods, got {t}")));
    }
    let x = y.select(r, &(0..t - 1).collect::<Vec<_>>())?;
    let yp = y.select(r, &(1..t).collect::<Vec<_>>())?;
    Ok((x, yp))
}

fn require_square(x: &Tensor) -> Result<()> {
    if x.order() < 3 || x.dims()[0] != x.dims()[1] {
        return Err(Error::Shape(format!("relational slices must be square, got {:?}", x.dims())));
    }
    Ok(())
}

/// Swaps the first two modes.
pub fn transpose_dyads(x: &Tensor) -> Result<Tensor> {
    require_square(x)?;
    Ok(Tensor::from_fn(x.dims(), |i| {
        let mut j = i.to_vec();
        j.swap(0, 1);
        x.get(&j)
    }))
}

/// Appends the dyad-transposed copy of every slice along the third mode.
pub fn append_reciprocal(x: &Tensor) -> Result<Tensor> {
    Tensor::concat(&[x, &transpose_dyads(x)?], 2)
}

/// `Σ_{i3} (y_{i1 i3} + y_{i3 i1})(y_{i2 i3} + y_{i3 i2})` for each slice of
/// an `m x m x J x T` tensor. With an undefined diagonal the sum skips
/// `i3 ∈ {i1, i2}` and the diagonal of the result is zero.
pub fn transitivity(y: &Tensor, diagonal_defined: bool) -> Result<Tensor> {
    require_square(y)?;
    let m = y.dims()[0];
    let slices = y.len() / (m * m);
    let mut out = Tensor::zeros(y.dims());
    for s in 0..slices {
        let block = &y.data()[s * m * m..(s + 1) * m * m];
        let a = DMatrix::from_column_slice(m, m, block);
        let mut sym = &a + a.transpose();
        if !diagonal_defined {
            sym.fill_diagonal(0.0);
        }
        let mut t = &sym * &sym;
        if !diagonal_defined {
            t.fill_diagonal(0.0);
        }
        out.data_mut()[s * m * m..(s + 1) * m * m].copy_from_slice(t.as_slice());
    }
    Ok(out)
}

/// Adds a weekly/monthly mode: slice 1 is `x_t`, slice 2 the mean of
/// `x_{t-1}, ..., x_{t-w}`. The first `w` periods are dropped.
pub fn append_monthly_lag(x: &Tensor, window: usize) -> Result<Tensor> {
    let r = x.order() - 1;
    let t = x.dims()[r];
    if window == 0 || t <= window {
        return Err(Error::InvalidArgument(format!(
            "a window of {window} needs more than {window} periods, got {t}"
        )));
    }
    let stride = x.len() / t;
    let n = t - window;
    let mut dims = x.dims()[..r].to_vec();
    dims.extend([2, n]);
    let mut out = Tensor::zeros(&dims);
    for tt in 0..n {
        let src = tt + window;
        let base = 2 * stride * tt;
        for s in 0..stride {
            let weekly = x.data()[s + stride * src];
            let monthly = (1..=window).map(|l| x.data()[s + stride * (src - l)]).sum::<f64>() / window as f64;
            out.data_mut()[base + s] = weekly;
            out.data_mut()[base + stride + s] = monthly;
        }
    }
    Ok(out)
}

/// Drops the first `window` periods and inserts a singleton mode before time.
pub fn align_outcome_monthly(y: &Tensor, window: usize) -> Result<Tensor> {
    let r = y.order() - 1;
    let t = y.dims()[r];
    if t <= window {
        return Err(Error::InvalidArgument(format!("a window of {window} needs more than {window} periods")));
    }
    let kept = y.select(r, &(window..t).collect::<Vec<_>>())?;
    let mut dims = y.dims()[..r].to_vec();
    dims.extend([1, t - window]);
    kept.reshape(dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemeanOrder {
    /// Quantile-transform, then demean.
    After,
    Before,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub include_lag1: bool,
    pub include_reciprocal: bool,
    pub include_transitivity: bool,
    pub include_monthly: bool,
    pub monthly_window: usize,
    pub demean: DemeanOrder,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            include_lag1: true,
            include_reciprocal: true,
            include_transitivity: true,
            include_monthly: true,
            monthly_window: 4,
            demean: DemeanOrder::After,
        }
    }
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.include_lag1 || self.include_reciprocal || self.include_transitivity) {
            return Err(Error::InvalidArgument("at least one predictor family must be enabled".into()));
        }
        if self.include_monthly && self.monthly_window == 0 {
            return Err(Error::InvalidArgument("monthly window must be positive".into()));
        }
        Ok(())
    }
}

/// Constructed regression arrays and the bookkeeping needed to read them.
#[derive(Debug, Clone)]
pub struct RelationalFeatures {
    pub x: Tensor,
    pub y: Tensor,
    /// Diagonal mask over `y` when self-relations are undefined.
    pub mask: Option<Mask>,
    /// Label of every slice along the predictor's third mode.
    pub predictor_labels: Vec<String>,
    /// Period label of every replication.
    pub periods: Vec<String>,
}

fn zero_diagonal(t: &mut Tensor) {
    let m = t.dims()[0];
    let slices = t.len() / (m * m);
    for s in 0..slices {
        for i in 0..m {
            t.data_mut()[s * m * m + i * (m + 1)] = 0.0;
        }
    }
}

fn normalize_series(t: &Tensor, order: DemeanOrder) -> Tensor {
    match order {
        DemeanOrder::After => demean(&quantile_transform_series(t)),
        DemeanOrder::Before => quantile_transform_series(&demean(t)),
        DemeanOrder::Off => quantile_transform_series(t),
    }
}

/// Transform, demean, lag, reciprocity, transitivity, then the monthly stack.
pub fn build_features(panel: &EventPanel, spec: &PredictorSpec) -> Result<RelationalFeatures> {
    spec.validate()?;
    let mut y = normalize_series(&panel.counts, spec.demean);
    if !panel.diagonal_defined {
        zero_diagonal(&mut y);
    }
    let (lagged, mut yy) = build_lag1(&y)?;
    let mut periods: Vec<String> = panel.periods[1..].to_vec();
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    if spec.include_lag1 {
        parts.push(lagged.clone());
        labels.extend(panel.types.iter().map(|t| format!("lag:{t}")));
    }
    if spec.include_reciprocal {
        parts.push(transpose_dyads(&lagged)?);
        labels.extend(panel.types.iter().map(|t| format!("reciprocal:{t}")));
    }
    if spec.include_transitivity {
        let raw = transitivity(&lagged, panel.diagonal_defined)?;
        let mut tr = normalize_series(&raw, spec.demean);
        if !panel.diagonal_defined {
            zero_diagonal(&mut tr);
        }
        parts.push(tr);
        labels.extend(panel.types.iter().map(|t| format!("transitivity:{t}")));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let mut x = Tensor::concat(&refs, 2)?;
    if spec.include_monthly {
        x = append_monthly_lag(&x, spec.monthly_window)?;
        yy = align_outcome_monthly(&yy, spec.monthly_window)?;
        periods.drain(..spec.monthly_window);
    }
    let mask = (!panel.diagonal_defined).then(|| Mask::diagonal(yy.dims(), 0, 1));
    Ok(RelationalFeatures { x, y: yy, mask, predictor_labels: labels, periods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantile_examples() {
        let q = quantile_transform(&[5.0, 1.0, 9.0]);
        assert!(q[0].abs() < 1e-12);
        assert!((q[1] + 0.6744897501960817).abs() < 1e-9);
        assert!((q[2] - 0.6744897501960817).abs() < 1e-9);
        assert!(quantile_transform(&[3.0; 7]).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(quantile_transform(&[2.0]), vec![0.0]);
    }

    #[test]
    fn quantile_moments() {
        let s: Vec<f64> = (0..800).map(|i| ((i * 7919) % 800) as f64 * 0.37).collect();
        let q = quantile_transform(&s);
        let mean = q.iter().sum::<f64>() / 800.0;
        let var = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 800.0;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn quantile_is_monotone(v in prop::collection::vec(-5i32..5, 1..60)) {
            let s: Vec<f64> = v.iter().map(|&a| a as f64).collect();
            let q = quantile_transform(&s);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] < s[j] { prop_assert!(q[i] < q[j]); }
                    if s[i] == s[j] { prop_assert_eq!(q[i], q[j]); }
                }
            }
        }

        #[test]
        fn demeaned_series_sum_to_zero(v in prop::collection::vec(-100.0f64..100.0, 6..48)) {
            let t = Tensor::new(vec![2, v.len() / 2], v[..2 * (v.len() / 2)].to_vec()).unwrap();
            let d = demean(&t);
            for s in 0..2 {
                let sum: f64 = (0..t.dims()[1]).map(|r| d.get(&[s, r])).sum();
                prop_assert!(sum.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn demean_examples() {
        let z = Tensor::new(vec![1, 4], vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        assert_eq!(demean(&z), z);
        let c = Tensor::new(vec![1, 3], vec![4.0; 3]).unwrap();
        assert_eq!(demean(&c), Tensor::zeros(&[1, 3]));
    }

    #[test]
    fn lag_examples() {
        let y = Tensor::from_fn(&[2, 2, 1, 2], |i| (i[0] + 2 * i[1] + 10 * i[3]) as f64);
        let (x, yp) = build_lag1(&y).unwrap();
        assert_eq!(x, y.select(3, &[0]).unwrap());
        assert_eq!(yp, y.select(3, &[1]).unwrap());
        let y = Tensor::from_fn(&[2, 2, 1, 6], |i| (i[0] * 3 + i[3] * i[1]) as f64);
        let (x, yp) = build_lag1(&y).unwrap();
        for t in 1..5 {
            assert_eq!(x.select(3, &[t]).unwrap(), yp.select(3, &[t - 1]).unwrap());
        }
        assert!(build_lag1(&Tensor::zeros(&[2, 2, 1, 1])).is_err());
        let c = Tensor::from_fn(&[2, 2, 1, 4], |i| (i[0] + i[1]) as f64);
        let (x, yp) = build_lag1(&c).unwrap();
        assert_eq!(x, yp);
    }

    #[test]
    fn reciprocal_examples() {
        let x = Tensor::from_fn(&[3, 3, 2, 2], |i| (i[0] * 100 + i[1] * 10 + i[2] + 7 * i[3]) as f64);
        let r = append_reciprocal(&x).unwrap();
        assert_eq!(r.dims(), &[3, 3, 4, 2]);
        assert_eq!(r.get(&[1, 0, 2, 0]), x.get(&[0, 1, 0, 0]));
        let back = transpose_dyads(&transpose_dyads(&x).unwrap()).unwrap();
        assert_eq!(back, x);
        let sym = Tensor::from_fn(&[3, 3, 1, 1], |i| (i[0] + i[1]) as f64);
        let r = append_reciprocal(&sym).unwrap();
        assert_eq!(r.select(2, &[1]).unwrap(), sym);
        assert!(append_reciprocal(&Tensor::zeros(&[2, 3, 1, 1])).is_err());
    }

    #[test]
    fn transitivity_examples() {
        let mut y = Tensor::zeros(&[3, 3, 1, 1]);
        for (a, b) in [(0, 2), (2, 0), (1, 2), (2, 1)] {
            y.set(&[a, b, 0, 0], 1.0);
        }
        for defined in [true, false] {
            let t = transitivity(&y, defined).unwrap();
            assert_eq!(t.get(&[0, 1, 0, 0]), 4.0);
            assert_eq!(t.get(&[1, 0, 0, 0]), 4.0);
        }
        assert_eq!(transitivity(&Tensor::zeros(&[4, 4, 2, 3]), false).unwrap(), Tensor::zeros(&[4, 4, 2, 3]));

        let r = Tensor::from_fn(&[5, 5, 2, 3], |i| ((i[0] * 13 + i[1] * 7 + i[2] * 3 + i[3]) % 5) as f64);
        let t = transitivity(&r, true).unwrap();
        assert_eq!(t, transpose_dyads(&t).unwrap());
    }

    #[test]
    fn transitivity_ignores_undefined_diagonal() {
        let base = Tensor::from_fn(&[4, 4, 1, 1], |i| ((i[0] * 5 + i[1] * 3) % 4) as f64);
        let mut noisy = base.clone();
        for i in 0..4 {
            noisy.set(&[i, i, 0, 0], 1000.0 + i as f64);
        }
        assert_eq!(transitivity(&base, false).unwrap(), transitivity(&noisy, false).unwrap());
    }

    #[test]
    fn monthly_examples() {
        let c = Tensor::from_fn(&[2, 2, 3, 7], |i| (i[0] + i[1] + i[2]) as f64);
        let m = append_monthly_lag(&c, 4).unwrap();
        assert_eq!(m.dims(), &[2, 2, 3, 2, 3]);
        assert_eq!(m.select(3, &[0]).unwrap(), m.select(3, &[1]).unwrap());

        let ramp = Tensor::new(vec![1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let m = append_monthly_lag(&ramp, 4).unwrap();
        assert_eq!(m.dims(), &[1, 2, 1]);
        assert_eq!(m.get(&[0, 0, 0]), 5.0);
        assert_eq!(m.get(&[0, 1, 0]), 2.5);
        assert!(append_monthly_lag(&ramp, 5).is_err());
    }

    fn csv_panel(text: &str) -> Result<EventPanel> {
        ingest_events(text.as_bytes(), None, false)
    }

    #[test]
    fn ingest_examples() {
        assert!(csv_panel("source,target,type,period,count\n").is_err());
        let p = csv_panel("source,target,type,period,count\na,b,v+,1,3\n").unwrap();
        assert_eq!(p.nodes, vec!["a", "b"]);
        assert_eq!(p.counts.dims(), &[2, 2, 1, 1]);
        assert_eq!(p.counts.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(p.counts.get(&[0, 1, 0, 0]), 3.0);

        let p = csv_panel("source,target,type,period,count\na,b,v+,1,3\na,b,v+,1,3\n").unwrap();
        assert_eq!(p.counts.get(&[0, 1, 0, 0]), 6.0);

        let bad = csv_panel("source,target,type,period,count\na,b,v+,1,3\na,b,v+,2,-1\n");
        assert!(matches!(bad, Err(Error::Parse { line: 3, .. })));
        let bad = csv_panel("source,target,type,period,count,extra\na,b,v+,1,3,0\n");
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ingest_orders_labels() {
        let text = "period,source,target,type,count\n10,b,a,x,1\n2,c,a,x,1\n9,a,c,y,2\n";
        let p = csv_panel(text).unwrap();
        assert_eq!(p.periods, vec!["2", "9", "10"]);
        assert_eq!(p.nodes, vec!["a", "b", "c"]);
        let order = LabelOrdering { nodes: Some(vec!["c".into(), "b".into(), "a".into()]), ..Default::default() };
        let p = ingest_events(text.as_bytes(), Some(&order), false).unwrap();
        assert_eq!(p.counts.get(&[1, 2, 0, 2]), 1.0);
        let short = LabelOrdering { nodes: Some(vec!["a".into()]), ..Default::default() };
        assert!(ingest_events(text.as_bytes(), Some(&short), false).is_err());
    }

    fn synthetic_panel(m: usize, j: usize, t: usize) -> EventPanel {
        let counts = Tensor::from_fn(&[m, m, j, t], |i| ((i[0] * 31 + i[1] * 17 + i[2] * 5 + i[3] * 3) % 11 / 4) as f64);
        EventPanel {
            nodes: (0..m).map(|i| format!("n{i}")).collect(),
            types: (0..j).map(|i| format!("t{i}")).collect(),
            periods: (0..t).map(|i| i.to_string()).collect(),
            counts,
            diagonal_defined: false,
        }
    }

    #[test]
    fn pipeline_shapes_and_determinism() {
        let p = synthetic_panel(5, 3, 20);
        let f = build_features(&p, &PredictorSpec::default()).unwrap();
        assert_eq!(f.x.dims(), &[5, 5, 9, 2, 15]);
        assert_eq!(f.y.dims(), &[5, 5, 3, 1, 15]);
        assert_eq!(f.periods.len(), 15);
        assert_eq!(f.predictor_labels.len(), 9);
        assert_eq!(f.mask.as_ref().unwrap().dims(), f.y.dims());
        let g = build_features(&p, &PredictorSpec::default()).unwrap();
        assert_eq!(f.x, g.x);
        assert_eq!(f.y, g.y);

        let spec = PredictorSpec { include_monthly: false, include_transitivity: false, ..Default::default() };
        let f = build_features(&p, &spec).unwrap();
        assert_eq!(f.x.dims(), &[5, 5, 6, 19]);
        let none = PredictorSpec {
            include_lag1: false,
            include_reciprocal: false,
            include_transitivity: false,
            ..Default::default()
        };
        assert!(build_features(&p, &none).is_err());
    }

    #[test]
    fn diagonal_never_leaks_into_predictors() {
        let p = synthetic_panel(4, 2, 12);
        let mut q = p.clone();
        for t in 0..12 {
            for j in 0..2 {
                for i in 0..4 {
                    q.counts.set(&[i, i, j, t], (100 + t * 7 + i) as f64);
                }
            }
        }
        let a = build_features(&p, &PredictorSpec::default()).unwrap();
        let b = build_features(&q, &PredictorSpec::default()).unwrap();
        assert_eq!(a.x, b.x);
    }
}
