//! Command-line front end. Exit codes: 0 converged, 1 too many failed runs
//! in an experiment, 2 usage or input error, 3 iteration cap, 4 diverged.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_client_dir, write_client_dir, DataFormat, LoadOptions, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{self, Algorithm, ExperimentConfig, ProblemSource};
use crate::loss::{LossKind, LossModel};
use crate::seed::derive_seed;
use crate::trace::RunStatus;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE_BUDGET: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "fedgia", version, about = "Federated learning with FedGiA and baseline trainers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic non-i.i.d. regression problem as per-client CSV files.
    GenData(GenDataArgs),
    /// Run one trainer and write its trace.
    Run(RunArgs),
    /// Run all five trainers over a config's instances.
    Compare(ExperimentArgs),
    /// Run a config's k0 and alpha grid.
    Sweep(ExperimentArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    dmin: usize,
    #[arg(long, default_value_t = 150)]
    dmax: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgoArg {
    Fedavg,
    Fedprox,
    Fedpd,
    /// FedGiA with the Hessian bound picked by `--variant`.
    Fedgia,
    #[value(name = "fedgia-d")]
    FedgiaD,
    #[value(name = "fedgia-g")]
    FedgiaG,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Diagonal,
    Gram,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Ls,
    Logl2,
    Lognc,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ls => LossKind::LeastSquares,
            LossArg::Logl2 => LossKind::LogisticL2,
            LossArg::Lognc => LossKind::LogisticNonconvex,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Libsvm,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    algo: AlgoArg,
    #[arg(long, value_enum, default_value = "ls")]
    loss: LossArg,
    #[arg(long, default_value_t = 1)]
    k0: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// FedGiA `σ = t·r/m` multiplier; loss default when omitted.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long, value_enum, default_value = "diagonal")]
    variant: VariantArg,
    /// Stop when the squared gradient norm falls below this; loss default when omitted.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset file to partition, or a directory written by `gen-data`.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    skip_header: bool,
    /// Client count when partitioning a dataset file.
    #[arg(long)]
    m: Option<usize>,
    /// Synthetic generator settings as `key=value` pairs (m, n, dmin, dmax).
    #[arg(long, num_args = 1..)]
    synthetic: Vec<String>,
    /// Trace CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threads for client updates.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; the config's `out` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Run(a) => run(&a),
        Command::Compare(a) => experiment(&a, true),
        Command::Sweep(a) => experiment(&a, false),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_USAGE
    })
}

fn gen_data(a: &GenDataArgs) -> Result<i32> {
    let spec = SyntheticSpec { m: a.m, n: a.n, d_min: a.dmin, d_max: a.dmax, seed: a.seed };
    let problem = crate::data::generate_linear_noniid(&spec)?;
    write_client_dir(&problem, &a.out)?;
    println!("wrote {} clients, {} samples to {}", problem.num_clients(), problem.total_samples(), a.out.display());
    Ok(0)
}

fn parse_synthetic(pairs: &[String]) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for pair in pairs {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config { key: pair.clone(), message: "expected key=value".into() })?;
        let value: usize =
            v.parse().map_err(|_| Error::Config { key: k.into(), message: format!("cannot parse `{v}`") })?;
        match k {
            "m" => spec.m = value,
            "n" => spec.n = value,
            "dmin" => spec.d_min = value,
            "dmax" => spec.d_max = value,
            _ => return Err(Error::Config { key: k.into(), message: "unknown synthetic key".into() }),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn run(a: &RunArgs) -> Result<i32> {
    let algorithm = match (a.algo, a.variant) {
        (AlgoArg::Fedavg, _) => Algorithm::FedAvg,
        (AlgoArg::Fedprox, _) => Algorithm::FedProx,
        (AlgoArg::Fedpd, _) => Algorithm::FedPd,
        (AlgoArg::FedgiaD, _) | (AlgoArg::Fedgia, VariantArg::Diagonal) => Algorithm::FedGiaD,
        (AlgoArg::FedgiaG, _) | (AlgoArg::Fedgia, VariantArg::Gram) => Algorithm::FedGiaG,
    };
    let loss: LossKind = a.loss.into();
    let source = match &a.data {
        Some(path) => {
            let format = match a.format {
                FormatArg::Csv => DataFormat::Csv,
                FormatArg::Libsvm => DataFormat::Libsvm,
            };
            let options = LoadOptions { format, skip_header: a.skip_header, n_features: None };
            let m = if path.is_dir() {
                1
            } else {
                a.m.ok_or_else(|| Error::invalid("--m is required with a dataset file"))?
            };
            ProblemSource::File { path: path.clone(), options, m }
        }
        None => ProblemSource::Synthetic(parse_synthetic(&a.synthetic)?),
    };
    let cfg = ExperimentConfig {
        source,
        loss,
        algorithms: vec![algorithm],
        trials: 1,
        seed: a.seed,
        k0: vec![a.k0],
        alpha: vec![a.alpha],
        t: a.t,
        tol: a.tol,
        max_iter: a.max_iter,
        max_cr: None,
        workers: 1,
        out: None,
    };
    cfg.validate()?;

    let problem = match &cfg.source {
        ProblemSource::File { path, .. } if path.is_dir() => load_client_dir(path, LossModel::with_kind(loss))?,
        ProblemSource::File { path, options, .. } => {
            let (features, mut labels) = crate::data::load_dataset(path, options)?;
            if loss.is_logistic() {
                crate::data::bind_logistic_labels(&mut labels)?;
            }
            harness::build_instance(&cfg, Some(&(features, labels)), 0)?
        }
        ProblemSource::Synthetic(_) => harness::build_instance(&cfg, None, 0)?,
    };
    let selection_seed = derive_seed(derive_seed(a.seed, 0), 1);
    let trace =
        harness::run_algorithm_with_workers(&problem, algorithm, a.k0, a.alpha, selection_seed, &cfg, a.workers)?;

    if let Some(out) = &a.out {
        write_trace(out, &trace)?;
    }
    println!(
        "objective={} error={} cr={} time={:.6}",
        trace.final_objective(),
        trace.final_error(),
        trace.total_cr(),
        trace.elapsed_s()
    );
    if trace.status != RunStatus::Converged {
        eprintln!("{}: {}", trace.algorithm, trace.status.as_str());
    }
    Ok(trace.status.exit_code())
}

fn write_trace(path: &Path, trace: &crate::trace::RunTrace) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn experiment(a: &ExperimentArgs, compare: bool) -> Result<i32> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    if compare {
        cfg.algorithms = Algorithm::ALL.to_vec();
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = a.trials {
        cfg.trials = trials;
    }
    if let Some(workers) = a.workers {
        cfg.workers = workers;
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    let report = harness::run_experiment(&cfg)?;
    harness::write_summary_csv(io::stdout().lock(), &report.summary)?;
    if report.exceeds_failure_budget() {
        eprintln!("{} of {} runs failed", report.failures(), report.runs.len());
        return Ok(EXIT_FAILURE_BUDGET);
    }
    Ok(0)
}
