//! On-disk formats: TNSR1 tensors, MLTRF1 factor sets, MLTRC1 covariances,
//! chain stores and CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::ScoreTable;
use crate::gibbs::{ChainStore, PosteriorSummary};
use crate::gls::{ModeCorrelationDiagnostic, SeparableCovariance};
use crate::tensor::{FactorMatrix, KroneckerFactorSet, Tensor};

const TENSOR_MAGIC: &str = "TNSR1";

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    dims: Vec<usize>,
    dtype: String,
    order: String,
}

/// Magic line, a JSON header line, then little-endian `f64` values in storage order.
pub fn write_tensor<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    let header = TensorHeader { dims: t.dims().to_vec(), dtype: "f64".into(), order: "colmajor".into() };
    writeln!(w, "{TENSOR_MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    let mut buf = Vec::with_capacity(8 * t.len());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: R) -> Result<Tensor> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != TENSOR_MAGIC {
        return Err(Error::Format("not a TNSR1 tensor file".into()));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: TensorHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f64" || header.order != "colmajor" {
        return Err(Error::Format(format!("unsupported layout {}/{}", header.dtype, header.order)));
    }
    let len: usize = header.dims.iter().product();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * len {
        return Err(Error::Format(format!("expected {} data bytes, found {}", 8 * len, bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(header.dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_tensor(t, std::io::BufWriter::new(fs::File::create(path)?))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(fs::File::open(path)?)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, v: &[f64]) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Format(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, v.len())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

#[derive(Serialize, Deserialize)]
struct FactorRecord {
    rows: usize,
    cols: usize,
    fixed_identity: bool,
    entries: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FactorDoc {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iteration: Option<usize>,
    modes: Vec<FactorRecord>,
}

fn factor_doc(f: &KroneckerFactorSet, iteration: Option<usize>) -> FactorDoc {
    FactorDoc {
        format: "MLTRF1".into(),
        iteration,
        modes: f
            .iter()
            .map(|m| FactorRecord { rows: m.rows(), cols: m.cols(), fixed_identity: m.fixed_identity, entries: row_major(&m.matrix) })
            .collect(),
    }
}

fn factors_from_doc(doc: FactorDoc) -> Result<KroneckerFactorSet> {
    if doc.format != "MLTRF1" {
        return Err(Error::Format(format!("expected MLTRF1, found {}", doc.format)));
    }
    let mut out = Vec::with_capacity(doc.modes.len());
    for r in doc.modes {
        let matrix = from_row_major(r.rows, r.cols, &r.entries)?;
        out.push(FactorMatrix { matrix, fixed_identity: r.fixed_identity });
    }
    KroneckerFactorSet::new(out).map_err(|e| Error::Format(e.to_string()))
}

pub fn factors_to_json(f: &KroneckerFactorSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(&factor_doc(f, None))?)
}

pub fn factors_from_json(s: &str) -> Result<KroneckerFactorSet> {
    factors_from_doc(serde_json::from_str(s)?)
}

#[derive(Serialize, Deserialize)]
struct CovRecord {
    dim: usize,
    entries: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CovDoc {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iteration: Option<usize>,
    tau2: f64,
    modes: Vec<CovRecord>,
}

fn cov_doc(c: &SeparableCovariance, iteration: Option<usize>) -> CovDoc {
    CovDoc {
        format: "MLTRC1".into(),
        iteration,
        tau2: c.tau2,
        modes: c.sigmas.iter().map(|s| CovRecord { dim: s.nrows(), entries: row_major(s) }).collect(),
    }
}

pub fn covariance_to_json(c: &SeparableCovariance) -> Result<String> {
    Ok(serde_json::to_string_pretty(&cov_doc(c, None))?)
}

pub fn covariance_from_json(s: &str) -> Result<SeparableCovariance> {
    let doc: CovDoc = serde_json::from_str(s)?;
    if doc.format != "MLTRC1" {
        return Err(Error::Format(format!("expected MLTRC1, found {}", doc.format)));
    }
    let sigmas = doc.modes.iter().map(|r| from_row_major(r.dim, r.dim, &r.entries)).collect::<Result<_>>()?;
    SeparableCovariance::new(sigmas, doc.tau2).map_err(|e| Error::Format(e.to_string()))
}

fn matrix_json(m: &DMatrix<f64>) -> serde_json::Value {
    json!({ "rows": m.nrows(), "cols": m.ncols(), "entries": row_major(m) })
}

/// Writes `chain_<i>/{manifest.json, factors.jsonl, covariance.jsonl}` under `dir`.
pub fn write_chain_store(store: &ChainStore, dir: &Path) -> Result<()> {
    let prior = json!({
        "eta0": store.prior.eta0,
        "tau0_sq": store.prior.tau0_sq,
        "modes": store.prior.modes.iter().map(|p| json!({
            "nu0": p.nu0,
            "s0": matrix_json(&p.s0),
            "m0": p.m0.as_ref().map(matrix_json),
        })).collect::<Vec<_>>(),
    });
    for c in &store.chains {
        let cdir = dir.join(format!("chain_{}", c.index));
        fs::create_dir_all(&cdir)?;
        let manifest = json!({
            "chain": c.index,
            "seed": c.seed,
            "run_seed": store.config.seed,
            "iters": store.config.iters,
            "burnin": store.config.burnin,
            "thin": store.config.thin,
            "iterations_completed": c.iterations_completed,
            "saved_draws": c.draws.len(),
            "error": c.error,
            "prior": prior,
        });
        fs::write(cdir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let mut f = std::io::BufWriter::new(fs::File::create(cdir.join("factors.jsonl"))?);
        let mut s = std::io::BufWriter::new(fs::File::create(cdir.join("covariance.jsonl"))?);
        for d in &c.draws {
            writeln!(f, "{}", serde_json::to_string(&factor_doc(&d.factors, Some(d.iteration)))?)?;
            writeln!(s, "{}", serde_json::to_string(&cov_doc(&d.covariance, Some(d.iteration)))?)?;
        }
        f.flush()?;
        s.flush()?;
    }
    Ok(())
}

/// Reads back the saved draws of one chain directory.
pub fn read_chain_draws(chain_dir: &Path) -> Result<Vec<(usize, KroneckerFactorSet, SeparableCovariance)>> {
    let f = fs::read_to_string(chain_dir.join("factors.jsonl"))?;
    let c = fs::read_to_string(chain_dir.join("covariance.jsonl"))?;
    let mut out = Vec::new();
    for (fl, cl) in f.lines().zip(c.lines()) {
        let doc: FactorDoc = serde_json::from_str(fl)?;
        let it = doc.iteration.unwrap_or(0);
        out.push((it, factors_from_doc(doc)?, covariance_from_json(cl)?));
    }
    Ok(out)
}

fn level_name(l: f64) -> String {
    let pct = format!("{:.1}", l * 100.0);
    let pct = pct.trim_end_matches('0').trim_end_matches('.').replace('.', "");
    if l < 0.1 {
        format!("q0{pct}")
    } else {
        format!("q{pct}")
    }
}

/// `mode,row,col,mean,sd,<quantiles>,flag` with 1-based indices.
pub fn summary_csv(s: &PosteriorSummary) -> String {
    let mut out = String::from("mode,row,col,mean,sd");
    for &l in &s.levels {
        out.push(',');
        out.push_str(&level_name(l));
    }
    out.push_str(",flag\n");
    for e in &s.entries {
        write!(out, "{},{},{},{},{}", e.mode + 1, e.row + 1, e.col + 1, e.mean, e.sd).unwrap();
        for q in &e.quantiles {
            write!(out, ",{q}").unwrap();
        }
        writeln!(out, ",{}", u8::from(e.flag)).unwrap();
    }
    out
}

/// Per-fold rows `model,fold,type,predictive_r2`, a blank line, then
/// `model,type,mean,min,max,folds`. Types are named from `type_labels` when given.
pub fn score_table_csv(t: &ScoreTable, type_labels: Option<&[String]>) -> String {
    let name = |ti: Option<usize>| match ti {
        None => "all".to_string(),
        Some(j) => type_labels.and_then(|l| l.get(j).cloned()).unwrap_or_else(|| (j + 1).to_string()),
    };
    let mut out = String::from("model,fold,type,predictive_r2\n");
    for r in &t.rows {
        let v = r.r2.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.model, r.fold + 1, name(r.type_index), v).unwrap();
    }
    out.push_str("\nmodel,type,mean,min,max,folds\n");
    for s in &t.summaries {
        writeln!(out, "{},{},{},{},{},{}", s.model, name(s.type_index), s.mean, s.min, s.max, s.folds).unwrap();
    }
    out
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Correlation matrix as plain CSV rows.
pub fn correlation_csv(d: &ModeCorrelationDiagnostic) -> String {
    matrix_csv(&d.correlation)
}

/// `index,eigenvalue,v1..vm`: one eigenpair per line, descending.
pub fn eigen_csv(d: &ModeCorrelationDiagnostic) -> String {
    let m = d.eigenvalues.len();
    let mut out = String::from("index,eigenvalue");
    for i in 0..m {
        write!(out, ",v{}", i + 1).unwrap();
    }
    out.push('\n');
    for (j, v) in d.eigenvalues.iter().enumerate() {
        write!(out, "{},{v}", j + 1).unwrap();
        for i in 0..m {
            write!(out, ",{}", d.eigenvectors[(i, j)]).unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::{gibbs_run, summarize, GibbsConfig, PriorSpec, SummaryOptions};
    use crate::als::RegressionDataset;
    use crate::gls::mode_residual_correlation;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_roundtrip(dims in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let mut s = seed;
            let t = Tensor::from_fn(&dims, |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            });
            let mut buf = Vec::new();
            write_tensor(&t, &mut buf).unwrap();
            prop_assert_eq!(read_tensor(&buf[..]).unwrap(), t);
        }
    }

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf[..buf.len() - 16]).to_string();
        assert_eq!(text, "TNSR1\n{\"dims\":[2,1],\"dtype\":\"f64\",\"order\":\"colmajor\"}\n");
        assert_eq!(&buf[buf.len() - 16..buf.len() - 8], &1.5f64.to_le_bytes());
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        assert!(matches!(read_tensor(&b"TNSR2\n"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn factor_and_covariance_roundtrip() {
        let f = KroneckerFactorSet::new(vec![
            FactorMatrix::free(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
            FactorMatrix::identity(2),
        ])
        .unwrap();
        let s = factors_to_json(&f).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["modes"][0]["entries"], json!([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(factors_from_json(&s).unwrap(), f);
        let c = SeparableCovariance::new(vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.1 + 0.2, 0.1 + 0.2, 1.0])], 0.3).unwrap();
        assert_eq!(covariance_from_json(&covariance_to_json(&c).unwrap()).unwrap(), c);
        assert!(factors_from_json("{\"format\":\"MLTRC1\",\"modes\":[]}").is_err());
    }

    #[test]
    fn chain_store_roundtrip() {
        let x = Tensor::from_fn(&[2, 8], |i| (i[0] as f64 - 0.5) * (i[1] as f64 + 1.0).sin());
        let y = x.scale(0.7);
        let data = RegressionDataset::new(x, y, None).unwrap();
        let prior = PriorSpec::default_for(data.output_dims());
        let store = gibbs_run(&data, &prior, &GibbsConfig { iters: 6, burnin: 1, chains: 2, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_chain_store(&store, dir.path()).unwrap();
        let back = read_chain_draws(&dir.path().join("chain_1")).unwrap();
        assert_eq!(back.len(), 5);
        for ((it, f, c), d) in back.iter().zip(&store.chains[1].draws) {
            assert_eq!(*it, d.iteration);
            assert_eq!(*f, d.factors);
            assert_eq!(*c, d.covariance);
        }
        let csv = summary_csv(&summarize(&store, &SummaryOptions::default()).unwrap());
        assert!(csv.starts_with("mode,row,col,mean,sd,q01,q025,q975,q99,flag\n1,1,1,"));
    }

    #[test]
    fn diagnostic_csv_shapes() {
        let r = Tensor::from_fn(&[3, 5], |i| ((i[0] + 1) * (i[1] * i[1] + 1)) as f64 % 7.0);
        let d = mode_residual_correlation(&r, 0).unwrap();
        assert_eq!(correlation_csv(&d).lines().count(), 3);
        let e = eigen_csv(&d);
        assert!(e.starts_with("index,eigenvalue,v1,v2,v3\n"));
        assert_eq!(e.lines().count(), 4);
    }
}
