use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use tenreg::als::fit_als_with_fixed;
use tenreg::eval::{Additive, FixedFactors, Multiplicative, RankOnePerDyad, Zero};
use tenreg::features::DemeanOrder;
use tenreg::io;
use tenreg::rng::child_seed;
use tenreg::{
    build_features, cross_validate, fit_gls, gibbs_run, ingest_events, make_splits, mode_residual_correlation,
    residual_tensor, summarize, AlsOptions, CvEntry, CvOptions, DemeanMode, Fitter, GibbsConfig, GlsOptions,
    Init, LabelOrdering, Mask, PredictorSpec, PriorSpec, RegressionDataset, SplitMode, SummaryOptions, Tensor,
};

use crate::config::Resolver;
use crate::error::{CliError, EXIT_SAMPLER};
use crate::{CvArgs, DiagnoseArgs, FitArgs, GibbsArgs, IngestArgs};

const MANIFEST: &str = "manifest.json";

/// Sidecar describing an ingested panel and its regression tensors.
#[derive(Debug, Serialize, Deserialize)]
struct PanelManifest {
    nodes: Vec<String>,
    types: Vec<String>,
    periods: Vec<String>,
    /// Period of each replication of `y.tnsr`.
    replication_periods: Vec<String>,
    predictor_labels: Vec<String>,
    diagonal_defined: bool,
    spec: PredictorSpec,
    x_dims: Vec<usize>,
    y_dims: Vec<usize>,
    files: Vec<String>,
}

fn out_dir(cfg: &mut Resolver, flag: Option<String>) -> Result<PathBuf, CliError> {
    let out = PathBuf::from(cfg.required::<String>("out", flag)?);
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| CliError::io(&p, e))
}

fn save(dir: &Path, name: &str, t: &Tensor) -> Result<(), CliError> {
    let p = dir.join(name);
    io::save_tensor(t, &p).map_err(|e| CliError::at(&p, e))
}

fn load(path: &Path) -> Result<Tensor, CliError> {
    io::load_tensor(path).map_err(|e| CliError::at(path, e))
}

/// Checks for unused config keys and writes `config.resolved`.
fn seal(cfg: &Resolver, command: &str, out: &Path) -> Result<(), CliError> {
    cfg.finish()?;
    write(out, "config.resolved", &cfg.render(command))
}

fn parse_modes(list: &str, order: usize) -> Result<Vec<usize>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<usize>() {
            Ok(k) if (1..=order).contains(&k) => Ok(k - 1),
            _ => Err(CliError::usage(format!("mode '{s}' is not in 1..={order}"))),
        })
        .collect()
}

/// `x.tnsr`, `y.tnsr` and, when present, `mask.tnsr` (nonzero = excluded).
fn load_panel(dir: &Path) -> Result<RegressionDataset, CliError> {
    let x = load(&dir.join("x.tnsr"))?;
    let y = load(&dir.join("y.tnsr"))?;
    let mpath = dir.join("mask.tnsr");
    let mask = if mpath.exists() {
        let m = load(&mpath)?;
        Some(Mask::new(m.dims().to_vec(), m.data().iter().map(|&v| v != 0.0).collect())?)
    } else {
        None
    };
    Ok(RegressionDataset::new(x, y, mask)?)
}

fn read_manifest(dir: &Path) -> Option<PanelManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    serde_json::from_str(&text).ok()
}

fn demean_order(s: &str) -> Result<DemeanOrder, CliError> {
    match s {
        "after" => Ok(DemeanOrder::After),
        "before" => Ok(DemeanOrder::Before),
        "off" => Ok(DemeanOrder::Off),
        _ => Err(CliError::usage(format!("unknown demean order '{s}' (after, before, off)"))),
    }
}

pub fn ingest(a: IngestArgs, mut cfg: Resolver) -> Result<(), CliError> {
    let events = PathBuf::from(cfg.required::<String>("events", a.events)?);
    let ordering_path = cfg.optional::<String>("ordering", a.ordering)?;
    let diagonal_defined = cfg.get("diagonal-defined", a.diagonal_defined, false)?;
    let d = PredictorSpec::default();
    let spec = PredictorSpec {
        include_lag1: cfg.get("lag1", a.lag1, d.include_lag1)?,
        include_reciprocal: cfg.get("reciprocal", a.reciprocal, d.include_reciprocal)?,
        include_transitivity: cfg.get("transitivity", a.transitivity, d.include_transitivity)?,
        include_monthly: cfg.get("monthly", a.monthly, d.include_monthly)?,
        monthly_window: cfg.get("monthly-window", a.monthly_window, d.monthly_window)?,
        demean: demean_order(&cfg.get("demean", a.demean, "after".to_string())?)?,
    };
    let out = out_dir(&mut cfg, a.out)?;
    seal(&cfg, "ingest", &out)?;

    let ordering = match ordering_path {
        Some(p) => {
            let p = PathBuf::from(p);
            let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let o: LabelOrdering =
                serde_json::from_str(&text).map_err(|e| CliError::parse(format!("{}: {e}", p.display())))?;
            Some(o)
        }
        None => None,
    };
    let file = fs::File::open(&events).map_err(|e| CliError::io(&events, e))?;
    let panel =
        ingest_events(std::io::BufReader::new(file), ordering.as_ref(), diagonal_defined).map_err(|e| CliError::at(&events, e))?;
    let f = build_features(&panel, &spec)?;

    save(&out, "panel.tnsr", &panel.counts)?;
    save(&out, "x.tnsr", &f.x)?;
    save(&out, "y.tnsr", &f.y)?;
    let mut files = vec!["panel.tnsr".to_string(), "x.tnsr".to_string(), "y.tnsr".to_string()];
    if let Some(m) = &f.mask {
        let t = Tensor::new(m.dims().to_vec(), m.excluded().iter().map(|&e| f64::from(u8::from(e))).collect())?;
        save(&out, "mask.tnsr", &t)?;
        files.push("mask.tnsr".into());
    }
    let manifest = PanelManifest {
        nodes: panel.nodes,
        types: panel.types,
        periods: panel.periods,
        replication_periods: f.periods,
        predictor_labels: f.predictor_labels,
        diagonal_defined,
        spec,
        x_dims: f.x.dims().to_vec(),
        y_dims: f.y.dims().to_vec(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::parse(e.to_string()))?;
    write(&out, MANIFEST, &(text + "\n"))
}

fn json_text(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json values always serialize") + "\n"
}

pub fn fit(a: FitArgs, mut cfg: Resolver) -> Result<(), CliError> {
    let panel = PathBuf::from(cfg.required::<String>("panel", a.panel)?);
    let method = cfg.get("method", a.method, "als".to_string())?;
    let d = AlsOptions::default();
    let opts = AlsOptions {
        tol: cfg.get("tol", a.tol, d.tol)?,
        max_sweeps: cfg.get("max-sweeps", a.max_sweeps, d.max_sweeps)?,
        ridge: cfg.get("ridge", a.ridge, d.ridge)?,
    };
    let seed = cfg.get("seed", a.seed, 0u64)?;
    let init = match cfg.get("init", a.init, "random".to_string())?.as_str() {
        "random" => Init::Random { seed },
        "identity" => Init::Identity,
        other => return Err(CliError::usage(format!("unknown init '{other}' (random, identity)"))),
    };
    let fixed = cfg.get("fixed-modes", a.fixed_modes, String::new())?;
    let out = out_dir(&mut cfg, a.out)?;
    seal(&cfg, "fit", &out)?;
    opts.validate()?;

    let data = load_panel(&panel)?;
    let fixed = parse_modes(&fixed, data.modes())?;
    let (factors, report) = match method.as_str() {
        "als" => {
            let fit = fit_als_with_fixed(&data, &init, &fixed, &opts)?;
            let report = json!({
                "method": "als",
                "objective": "rss",
                "objective_trace": fit.objective_trace,
                "rss": fit.final_rss(),
                "sweeps": fit.sweeps,
                "converged": fit.converged,
            });
            (fit.factors, report)
        }
        "gls" => {
            let g = fit_gls(&data, &init, None, &fixed, &GlsOptions { als: opts, estimate_covariance: true })?;
            let rss = residual_tensor(&data, &g.factors)?.frobenius_norm_sq();
            write(&out, "covariance.json", &(io::covariance_to_json(&g.covariance)? + "\n"))?;
            let report = json!({
                "method": "gls",
                "objective": "negative_log_likelihood",
                "objective_trace": g.nll_trace,
                "rss": rss,
                "tau2": g.covariance.tau2,
                "sweeps": g.sweeps,
                "converged": g.converged,
            });
            (g.factors, report)
        }
        other => return Err(CliError::usage(format!("unknown method '{other}' (als, gls)"))),
    };
    write(&out, "factors.json", &(io::factors_to_json(&factors)? + "\n"))?;
    save(&out, "residual.tnsr", &residual_tensor(&data, &factors)?)?;
    write(&out, "report.json", &json_text(&report))
}

pub fn gibbs(a: GibbsArgs, mut cfg: Resolver) -> Result<(), CliError> {
    let panel = PathBuf::from(cfg.required::<String>("panel", a.panel)?);
    let d = GibbsConfig::default();
    let iters = cfg.get("iters", a.iters, d.iters)?;
    let burnin = cfg.get_or_else("burnin", a.burnin, || iters / 11)?;
    let chains = cfg.get("chains", a.chains, d.chains)?;
    let thin = cfg.get("thin", a.thin, d.thin)?;
    let seed = cfg.get("seed", a.seed, d.seed)?;
    let warm_start = cfg.get("warm-start", a.warm_start, d.warm_start)?;
    let s0_scale = cfg.get("s0-scale", a.s0_scale, 1.0)?;
    let nu0_extra = cfg.get("nu0-extra", a.nu0_extra, 1.0)?;
    let eta0 = cfg.get("eta0", a.eta0, 1.0)?;
    let tau0_sq = cfg.get("tau0-sq", a.tau0_sq, 1.0)?;
    let fix_tau2 = cfg.optional("fix-tau2", a.fix_tau2)?;
    let fixed = cfg.get("fixed-modes", a.fixed_modes, String::new())?;
    let out = out_dir(&mut cfg, a.out)?;
    seal(&cfg, "gibbs", &out)?;
    if !(s0_scale > 0.0) || !(nu0_extra > 0.0) {
        return Err(CliError::usage("s0-scale and nu0-extra must be positive"));
    }

    let data = load_panel(&panel)?;
    let fixed_modes = parse_modes(&fixed, data.modes())?;
    let mut prior = PriorSpec::default_for(data.output_dims());
    for (p, &m) in prior.modes.iter_mut().zip(data.output_dims()) {
        p.s0 *= s0_scale;
        p.nu0 = m as f64 + nu0_extra;
    }
    prior.eta0 = eta0;
    prior.tau0_sq = tau0_sq;
    let config = GibbsConfig { iters, burnin, chains, thin, seed, warm_start, fix_tau2, fixed_modes };
    let store = gibbs_run(&data, &prior, &config)?;

    let chain_dir = out.join("chains");
    io::write_chain_store(&store, &chain_dir).map_err(|e| CliError::at(&chain_dir, e))?;
    if store.total_draws() > 0 {
        let summary = summarize(&store, &SummaryOptions::default())?;
        write(&out, "summary.csv", &io::summary_csv(&summary))?;
        let report = json!({
            "draws": summary.draws,
            "tau2_mean": summary.tau2_mean,
            "max_chain_sd": summary.max_chain_sd,
            "failed_chains": store.failures().iter().map(|c| c.index).collect::<Vec<_>>(),
        });
        write(&out, "report.json", &json_text(&report))?;
    }
    let failures = store.failures();
    if let Some(first) = failures.first() {
        return Err(CliError {
            code: EXIT_SAMPLER,
            msg: format!(
                "{} of {} chains failed; saved draws kept under {}. First failure: {}",
                failures.len(),
                store.chains.len(),
                chain_dir.display(),
                first.error.as_deref().unwrap_or("")
            ),
        });
    }
    Ok(())
}

pub fn cv(a: CvArgs, mut cfg: Resolver) -> Result<(), CliError> {
    let panel = PathBuf::from(cfg.required::<String>("panel", a.panel)?);
    let models = cfg.get("models", a.models, "multiplicative,additive,rank-one-per-dyad".to_string())?;
    let folds = cfg.get("folds", a.folds, 10usize)?;
    let test_size = cfg.get("test-size", a.test_size, 55usize)?;
    let seed = cfg.get("seed", a.seed, 0u64)?;
    let split: SplitMode = cfg.get("split", a.split, "independent".to_string())?.parse()?;
    let demean: DemeanMode = cfg.get("demean", a.demean, "train".to_string())?.parse()?;
    let type_mode = cfg.optional("type-mode", a.type_mode)?;
    let oracle = cfg.optional::<String>("oracle-factors", a.oracle_factors)?;
    let d = AlsOptions::default();
    let als = AlsOptions {
        tol: cfg.get("tol", a.tol, d.tol)?,
        max_sweeps: cfg.get("max-sweeps", a.max_sweeps, d.max_sweeps)?,
        ridge: d.ridge,
    };
    let out = out_dir(&mut cfg, a.out)?;
    seal(&cfg, "cv", &out)?;
    als.validate()?;

    let data = Arc::new(load_panel(&panel)?);
    let type_mode = match type_mode {
        Some(k) if k == 0 || k > data.modes() => {
            return Err(CliError::usage(format!("type mode {k} is not in 1..={}", data.modes())))
        }
        Some(k) => Some(k - 1),
        None => None,
    };
    let mut entries = Vec::new();
    for name in models.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let fitter: Box<dyn Fitter> = match name {
            "multiplicative" => {
                Box::new(Multiplicative { opts: als.clone(), seed: child_seed(seed, 1), fixed_modes: vec![] })
            }
            "additive" => Box::new(Additive),
            "rank-one-per-dyad" => Box::new(RankOnePerDyad { opts: als.clone(), seed: child_seed(seed, 2) }),
            "zero" => Box::new(Zero),
            other => return Err(CliError::usage(format!("unknown model '{other}'"))),
        };
        entries.push(CvEntry { name: name.to_string(), fitter, data: data.clone() });
    }
    if let Some(p) = oracle {
        let p = PathBuf::from(p);
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let f = io::factors_from_json(&text).map_err(|e| CliError::at(&p, e))?;
        entries.push(CvEntry { name: "oracle".into(), fitter: Box::new(FixedFactors(f)), data: data.clone() });
    }
    if entries.is_empty() {
        return Err(CliError::usage("no models to score"));
    }
    let plan = make_splits(data.n(), folds, test_size, seed, split)?;
    let table = cross_validate(&entries, &plan, &CvOptions { demean, type_mode })?;
    let labels = match (type_mode, read_manifest(&panel)) {
        (Some(k), Some(m)) if m.types.len() == data.y().dims()[k] => Some(m.types),
        _ => None,
    };
    write(&out, "scores.csv", &io::score_table_csv(&table, labels.as_deref()))
}

pub fn diagnose(a: DiagnoseArgs, mut cfg: Resolver) -> Result<(), CliError> {
    let residual = PathBuf::from(cfg.required::<String>("residual", a.residual)?);
    let mode = cfg.required::<usize>("mode", a.mode)?;
    let out = out_dir(&mut cfg, a.out)?;
    seal(&cfg, "diagnose", &out)?;

    let r = load(&residual)?;
    if mode == 0 || mode > r.order() {
        return Err(CliError::usage(format!("mode {mode} is not in 1..={}", r.order())));
    }
    let diag = mode_residual_correlation(&r, mode - 1)?;
    write(&out, &format!("correlation_mode{mode}.csv"), &io::correlation_csv(&diag))?;
    write(&out, &format!("eigen_mode{mode}.csv"), &io::eigen_csv(&diag))
}
