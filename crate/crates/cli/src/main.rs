//! Command-line front end: ingest, fit, gibbs, cv and diagnose.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Resolver;
use crate::error::{CliError, EXIT_PARSE};

#[derive(Parser, Debug)]
#[command(name = "tenreg", version, about = "Multilinear tensor regression for relational panels")]
struct Cli {
    /// Worker threads (falls back to TENREG_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key=value settings file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build panel and regression tensors from an event CSV.
    Ingest(IngestArgs),
    /// Least-squares (als) or generalized least-squares (gls) fit.
    Fit(FitArgs),
    /// Gibbs sampler with chain store and posterior summary.
    Gibbs(GibbsArgs),
    /// Cross-validated predictive R² of competing models.
    Cv(CvArgs),
    /// Residual correlation along one mode.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// CSV with columns source,target,type,period,count.
    #[arg(long)]
    pub events: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// JSON file with optional "nodes", "types" and "periods" label lists.
    #[arg(long)]
    pub ordering: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub diagonal_defined: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub lag1: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub reciprocal: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub transitivity: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub monthly: Option<bool>,
    #[arg(long)]
    pub monthly_window: Option<usize>,
    /// after | before | off
    #[arg(long)]
    pub demean: Option<String>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Directory holding x.tnsr, y.tnsr and optionally mask.tnsr.
    #[arg(long)]
    pub panel: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// als | gls
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// random | identity
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Comma-separated 1-based modes pinned to the identity.
    #[arg(long)]
    pub fixed_modes: Option<String>,
}

#[derive(Args, Debug)]
pub struct GibbsArgs {
    #[arg(long)]
    pub panel: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Defaults to iters / 11 (500 of 5500).
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub warm_start: Option<bool>,
    /// Prior scale S_0 = c I for every mode.
    #[arg(long)]
    pub s0_scale: Option<f64>,
    /// Prior degrees of freedom nu_0 = m_k + this.
    #[arg(long)]
    pub nu0_extra: Option<f64>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub tau0_sq: Option<f64>,
    /// Hold tau^2 at this value instead of sampling it.
    #[arg(long)]
    pub fix_tau2: Option<f64>,
    #[arg(long)]
    pub fixed_modes: Option<String>,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[arg(long)]
    pub panel: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    /// Comma-separated: multiplicative, additive, rank-one-per-dyad, zero.
    #[arg(long)]
    pub models: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// disjoint | independent | blocked
    #[arg(long)]
    pub split: Option<String>,
    /// train | full | off
    #[arg(long)]
    pub demean: Option<String>,
    /// 1-based outcome mode indexing action types, for per-type scores.
    #[arg(long)]
    pub type_mode: Option<usize>,
    /// MLTRF1 file scored as the fixed model "oracle".
    #[arg(long)]
    pub oracle_factors: Option<String>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Residual tensor (TNSR1), e.g. residual.tnsr from fit.
    #[arg(long)]
    pub residual: Option<String>,
    /// 1-based mode.
    #[arg(long)]
    pub mode: Option<usize>,
    #[arg(long)]
    pub out: Option<String>,
}

fn threads(flag: Option<usize>, cfg: &mut Resolver) -> Result<usize, CliError> {
    let env = match std::env::var("TENREG_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            Some(v.trim().parse::<usize>().map_err(|e| CliError::parse(format!("TENREG_THREADS='{v}': {e}")))?)
        }
        _ => None,
    };
    cfg.get("threads", flag.or(env), 0)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Resolver::load(cli.config.as_deref())?;
    let n = threads(cli.threads, &mut cfg)?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Ingest(a) => commands::ingest(a, cfg),
        Command::Fit(a) => commands::fit(a, cfg),
        Command::Gibbs(a) => commands::gibbs(a, cfg),
        Command::Cv(a) => commands::cv(a, cfg),
        Command::Diagnose(a) => commands::diagnose(a, cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_PARSE as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
