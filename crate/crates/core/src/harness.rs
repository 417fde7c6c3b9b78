//! Multi-trial experiments: a flat `key = value` config, a grid over
//! algorithms, `k0` and `alpha`, per-trial problem instances shared by every
//! algorithm, and CSV output.
//!
//! Config format: one `key = value` per line, `#` starts a comment, lists are
//! comma separated. Recognised keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `loss` | `ls`, `logl2` or `lognc` | `ls` |
//! | `m` | number of clients | 128 |
//! | `n`, `dmin`, `dmax` | synthetic generator shape | 100, 50, 150 |
//! | `data`, `format`, `skip_header`, `n_features` | load and partition a file instead | none, `csv`, `false`, inferred |
//! | `trials` | instances per grid cell | 20 |
//! | `seed` | master seed | 0 |
//! | `algorithms` | subset of `fedavg, fedprox, fedpd, fedgia-d, fedgia-g` | all five |
//! | `k0`, `alpha` | sweep lists | `1`, `1` |
//! | `t`, `tol`, `max_iter`, `max_cr` | solver overrides | loss defaults |
//! | `workers` | parallel trials | 1 |
//! | `out` | output directory | none |

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::baselines::{run_baseline, BaselineKind, BaselineParams};
use crate::data::{
    bind_logistic_labels, generate_linear_noniid, load_dataset, partition_dataset, DataFormat, FederatedProblem,
    LoadOptions, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::fedgia::{self, AlgoParams};
use crate::loss::{ClientDataset, HessianVariant, LossKind, LossModel};
use crate::seed::derive_seed;
use crate::trace::{RunStatus, RunTrace};

pub const SUMMARY_CSV_HEADER: &str = "algorithm,k0,alpha,trials,obj_mean,cr_mean,time_mean_s,err_mean";
pub const RUNS_CSV_HEADER: &str = "algorithm,k0,alpha,trial,status,objective,error,cr,elapsed_s";

/// Share of failed runs above which an experiment is reported as failed.
pub const FAILURE_BUDGET: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FedAvg,
    FedProx,
    FedPd,
    FedGiaD,
    FedGiaG,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::FedAvg, Algorithm::FedProx, Algorithm::FedPd, Algorithm::FedGiaD, Algorithm::FedGiaG];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedPd => "fedpd",
            Algorithm::FedGiaD => "fedgia-d",
            Algorithm::FedGiaG => "fedgia-g",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Where each trial's problem instance comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSource {
    /// Fresh synthetic instance per trial; `spec.seed` is replaced by the trial seed.
    Synthetic(SyntheticSpec),
    /// One pooled dataset, re-partitioned across `m` clients per trial.
    File { path: PathBuf, options: LoadOptions, m: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: ProblemSource,
    pub loss: LossKind,
    pub algorithms: Vec<Algorithm>,
    pub trials: usize,
    pub seed: u64,
    pub k0: Vec<usize>,
    pub alpha: Vec<f64>,
    /// FedGiA `t`; the loss default when `None`.
    pub t: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    /// Baseline communication cap; `Some(0)` disables it.
    pub max_cr: Option<usize>,
    /// Trials evaluated concurrently.
    pub workers: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: ProblemSource::Synthetic(SyntheticSpec::default()),
            loss: LossKind::LeastSquares,
            algorithms: Algorithm::ALL.to_vec(),
            trials: 20,
            seed: 0,
            k0: vec![1],
            alpha: vec![1.0],
            t: None,
            tol: None,
            max_iter: None,
            max_cr: None,
            workers: 1,
            out: None,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(config_err(key, "list is empty"));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err(key, format!("expected true or false, found `{value}`"))),
    }
}

impl ExperimentConfig {
    /// Parses the flat config format. Unknown keys and malformed values are
    /// reported with the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut synth = SyntheticSpec::default();
        let mut m = None;
        let mut data: Option<PathBuf> = None;
        let mut opts = LoadOptions::new(DataFormat::Csv);

        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("line {} is not `key = value`", idx + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "loss" => {
                    cfg.loss =
                        LossKind::parse(value).ok_or_else(|| config_err(key, format!("unknown loss `{value}`")))?
                }
                "m" => m = Some(parse_value(key, value)?),
                "n" => synth.n = parse_value(key, value)?,
                "dmin" => synth.d_min = parse_value(key, value)?,
                "dmax" => synth.d_max = parse_value(key, value)?,
                "data" => data = Some(PathBuf::from(value)),
                "format" => {
                    opts.format =
                        DataFormat::parse(value).ok_or_else(|| config_err(key, format!("unknown format `{value}`")))?
                }
                "skip_header" => opts.skip_header = parse_bool(key, value)?,
                "n_features" => opts.n_features = Some(parse_value(key, value)?),
                "trials" => cfg.trials = parse_value(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "algorithms" => {
                    cfg.algorithms = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| Algorithm::parse(s).ok_or_else(|| config_err(key, format!("unknown algorithm `{s}`"))))
                        .collect::<Result<_>>()?;
                }
                "k0" => cfg.k0 = parse_list(key, value)?,
                "alpha" => cfg.alpha = parse_list(key, value)?,
                "t" => cfg.t = Some(parse_value(key, value)?),
                "tol" => cfg.tol = Some(parse_value(key, value)?),
                "max_iter" => cfg.max_iter = Some(parse_value(key, value)?),
                "max_cr" => cfg.max_cr = Some(parse_value(key, value)?),
                "workers" => cfg.workers = parse_value(key, value)?,
                "out" => cfg.out = Some(PathBuf::from(value)),
                _ => return Err(config_err(key, "unknown key")),
            }
        }

        cfg.source = match data {
            Some(path) => ProblemSource::File { path, options: opts, m: m.unwrap_or(synth.m) },
            None => {
                if let Some(m) = m {
                    synth.m = m;
                }
                ProblemSource::Synthetic(synth)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(config_err("trials", "must be at least 1"));
        }
        if self.algorithms.is_empty() {
            return Err(config_err("algorithms", "list is empty"));
        }
        if self.k0.is_empty() || self.k0.contains(&0) {
            return Err(config_err("k0", "entries must be positive"));
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(config_err("alpha", "entries must lie in (0, 1]"));
        }
        if self.workers == 0 {
            return Err(config_err("workers", "must be at least 1"));
        }
        if matches!(self.t, Some(t) if !(t > 0.0)) {
            return Err(config_err("t", "must be positive"));
        }
        if matches!(self.tol, Some(t) if !(t > 0.0)) {
            return Err(config_err("tol", "must be positive"));
        }
        if self.max_iter == Some(0) {
            return Err(config_err("max_iter", "must be at least 1"));
        }
        match &self.source {
            ProblemSource::Synthetic(spec) => {
                let key = if spec.m == 0 {
                    "m"
                } else if spec.n == 0 {
                    "n"
                } else {
                    "dmin"
                };
                spec.validate().map_err(|e| config_err(key, e.to_string()))
            }
            ProblemSource::File { m, .. } if *m == 0 => Err(config_err("m", "must be at least 1")),
            ProblemSource::File { .. } => Ok(()),
        }
    }
}

/// Relabels regression targets as `{0, 1}` by sign so the synthetic generator
/// can drive the logistic losses.
fn binarize_by_sign(problem: &FederatedProblem) -> Result<Vec<ClientDataset>> {
    problem
        .clients()
        .iter()
        .map(|c| ClientDataset::new(c.features().clone(), c.labels().map(|b| f64::from(u8::from(b > 0.0)))))
        .collect()
}

/// Builds the problem instance for `trial`. Its seed depends only on the
/// master seed and the trial index.
pub fn build_instance(
    cfg: &ExperimentConfig,
    pooled: Option<&(nalgebra::DMatrix<f64>, nalgebra::DVector<f64>)>,
    trial: usize,
) -> Result<FederatedProblem> {
    let seed = derive_seed(cfg.seed, trial as u64);
    let loss = LossModel::with_kind(cfg.loss);
    match &cfg.source {
        ProblemSource::Synthetic(spec) => {
            let problem = generate_linear_noniid(&SyntheticSpec { seed, ..*spec })?;
            if cfg.loss.is_logistic() {
                FederatedProblem::new(binarize_by_sign(&problem)?, loss)
            } else {
                problem.with_loss(loss)
            }
        }
        ProblemSource::File { m, .. } => {
            let (features, labels) = pooled.ok_or_else(|| Error::invalid("pooled dataset not loaded"))?;
            partition_dataset(features, labels, *m, seed, loss)
        }
    }
}

fn load_pooled(cfg: &ExperimentConfig) -> Result<Option<(nalgebra::DMatrix<f64>, nalgebra::DVector<f64>)>> {
    match &cfg.source {
        ProblemSource::Synthetic(_) => Ok(None),
        ProblemSource::File { path, options, .. } => {
            let (features, mut labels) = load_dataset(path, options)?;
            if cfg.loss.is_logistic() {
                bind_logistic_labels(&mut labels)?;
            }
            Ok(Some((features, labels)))
        }
    }
}

/// Runs one trainer with the config's overrides applied, single-threaded.
pub fn run_algorithm(
    problem: &FederatedProblem,
    algorithm: Algorithm,
    k0: usize,
    alpha: f64,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<RunTrace> {
    run_algorithm_with_workers(problem, algorithm, k0, alpha, seed, cfg, 1)
}

/// [`run_algorithm`] with `workers` threads for the client updates.
pub fn run_algorithm_with_workers(
    problem: &FederatedProblem,
    algorithm: Algorithm,
    k0: usize,
    alpha: f64,
    seed: u64,
    cfg: &ExperimentConfig,
    workers: usize,
) -> Result<RunTrace> {
    let baseline = match algorithm {
        Algorithm::FedGiaD | Algorithm::FedGiaG => {
            let variant = if algorithm == Algorithm::FedGiaD { HessianVariant::Diagonal } else { HessianVariant::Gram };
            let mut p = AlgoParams::for_problem(problem, variant);
            p.k0 = k0;
            p.alpha = alpha;
            p.seed = seed;
            p.workers = workers;
            if let Some(t) = cfg.t {
                p.t = t;
            }
            if let Some(tol) = cfg.tol {
                p.tol = tol;
            }
            if let Some(max_iter) = cfg.max_iter {
                p.max_iter = max_iter;
            }
            return fedgia::run(problem, p);
        }
        Algorithm::FedAvg => BaselineKind::FedAvg,
        Algorithm::FedProx => BaselineKind::FedProx,
        Algorithm::FedPd => BaselineKind::FedPd,
    };
    let mut p = BaselineParams::defaults(baseline, problem);
    p.k0 = k0;
    p.alpha = alpha;
    p.seed = seed;
    p.workers = workers;
    if let Some(tol) = cfg.tol {
        p.stop.tol = tol;
    }
    if let Some(max_iter) = cfg.max_iter {
        p.stop.max_iter = max_iter;
    }
    if let Some(cap) = cfg.max_cr {
        p.stop.max_cr = (cap > 0).then_some(cap);
    }
    run_baseline(problem, p)
}

/// Outcome of one `(algorithm, k0, alpha, trial)` cell.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub k0: usize,
    pub alpha: f64,
    pub trial: usize,
    pub outcome: std::result::Result<RunTrace, String>,
}

impl RunRecord {
    /// Errors and divergence count as failures; hitting a cap does not.
    pub fn failed(&self) -> bool {
        !matches!(&self.outcome, Ok(t) if t.status != RunStatus::Diverged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub k0: usize,
    pub alpha: f64,
    /// Runs that entered the means.
    pub trials: usize,
    pub obj_mean: f64,
    pub cr_mean: f64,
    pub time_mean_s: f64,
    pub err_mean: f64,
}

/// Arithmetic means of final objective, total CR, wall time and final error.
pub fn summarize(algorithm: &str, k0: usize, alpha: f64, traces: &[&RunTrace]) -> Result<SummaryRow> {
    if traces.is_empty() {
        return Err(Error::invalid("cannot summarize an empty trace list"));
    }
    let n = traces.len() as f64;
    let mean = |f: &dyn Fn(&RunTrace) -> f64| traces.iter().map(|t| f(t)).sum::<f64>() / n;
    Ok(SummaryRow {
        algorithm: algorithm.to_string(),
        k0,
        alpha,
        trials: traces.len(),
        obj_mean: mean(&|t| t.final_objective()),
        cr_mean: mean(&|t| t.total_cr() as f64),
        time_mean_s: mean(&|t| t.elapsed_s()),
        err_mean: mean(&|t| t.final_error()),
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.failed()).count()
    }

    pub fn failure_fraction(&self) -> f64 {
        self.failures() as f64 / self.runs.len().max(1) as f64
    }

    pub fn exceeds_failure_budget(&self) -> bool {
        self.failure_fraction() > FAILURE_BUDGET
    }
}

/// Runs the full grid. Trials run concurrently on `cfg.workers` threads;
/// results are reduced in `(k0, alpha, algorithm, trial)` order. When
/// `cfg.out` is set the summary, run list and traces are written there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let pooled = load_pooled(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;

    let per_trial: Vec<Result<Vec<RunRecord>>> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|trial| {
                let problem = build_instance(cfg, pooled.as_ref(), trial)?;
                let selection_seed = derive_seed(derive_seed(cfg.seed, trial as u64), 1);
                let mut records = Vec::new();
                for &k0 in &cfg.k0 {
                    for &alpha in &cfg.alpha {
                        for &algorithm in &cfg.algorithms {
                            let outcome = run_algorithm(&problem, algorithm, k0, alpha, selection_seed, cfg)
                                .map_err(|e| e.to_string());
                            match &outcome {
                                Ok(t) => log::info!(
                                    "{} k0={k0} alpha={alpha} trial={trial}: {} obj={:.6} cr={}",
                                    algorithm.name(),
                                    t.status.as_str(),
                                    t.final_objective(),
                                    t.total_cr()
                                ),
                                Err(e) => log::warn!("{} k0={k0} alpha={alpha} trial={trial}: {e}", algorithm.name()),
                            }
                            records.push(RunRecord { algorithm, k0, alpha, trial, outcome });
                        }
                    }
                }
                Ok(records)
            })
            .collect()
    });

    let mut runs = Vec::with_capacity(cfg.trials * cfg.k0.len() * cfg.alpha.len() * cfg.algorithms.len());
    for r in per_trial {
        runs.extend(r?);
    }
    runs.sort_by(|a, b| {
        let key = |r: &RunRecord| {
            let k0 = cfg.k0.iter().position(|&k| k == r.k0);
            let alpha = cfg.alpha.iter().position(|&a| a == r.alpha);
            let algo = cfg.algorithms.iter().position(|&x| x == r.algorithm);
            (k0, alpha, algo, r.trial)
        };
        key(a).cmp(&key(b))
    });

    let mut summary = Vec::new();
    for &k0 in &cfg.k0 {
        for &alpha in &cfg.alpha {
            for &algorithm in &cfg.algorithms {
                let ok: Vec<&RunTrace> = runs
                    .iter()
                    .filter(|r| r.algorithm == algorithm && r.k0 == k0 && r.alpha == alpha && !r.failed())
                    .filter_map(|r| r.outcome.as_ref().ok())
                    .collect();
                summary.push(summarize(algorithm.name(), k0, alpha, &ok).unwrap_or(SummaryRow {
                    algorithm: algorithm.name().to_string(),
                    k0,
                    alpha,
                    trials: 0,
                    obj_mean: f64::NAN,
                    cr_mean: f64::NAN,
                    time_mean_s: f64::NAN,
                    err_mean: f64::NAN,
                }));
            }
        }
    }

    let report = ExperimentReport { summary, runs };
    if let Some(dir) = &cfg.out {
        write_outputs(dir, &report)?;
    }
    Ok(report)
}

pub fn trace_file_name(algorithm: Algorithm, k0: usize, alpha: f64, trial: usize) -> String {
    format!("{}_k0-{k0}_alpha-{alpha}_trial-{trial}.csv", algorithm.name())
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.algorithm, r.k0, r.alpha, r.trials, r.obj_mean, r.cr_mean, r.time_mean_s, r.err_mean
        )?;
    }
    Ok(())
}

pub fn write_runs_csv<W: Write>(mut w: W, runs: &[RunRecord]) -> std::io::Result<()> {
    writeln!(w, "{RUNS_CSV_HEADER}")?;
    for r in runs {
        let mut line = format!("{},{},{},{},", r.algorithm.name(), r.k0, r.alpha, r.trial);
        match &r.outcome {
            Ok(t) => {
                let _ = write!(
                    line,
                    "{},{},{},{},{}",
                    t.status.as_str(),
                    t.final_objective(),
                    t.final_error(),
                    t.total_cr(),
                    t.elapsed_s()
                );
            }
            Err(_) => line.push_str("error,,,,"),
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes `summary.csv`, `runs.csv` and `traces/*.csv` under `dir`.
pub fn write_outputs(dir: &Path, report: &ExperimentReport) -> Result<()> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces)?;
    let mut w = BufWriter::new(File::create(dir.join("summary.csv"))?);
    write_summary_csv(&mut w, &report.summary)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("runs.csv"))?);
    write_runs_csv(&mut w, &report.runs)?;
    w.flush()?;
    for r in &report.runs {
        if let Ok(t) = &r.outcome {
            let mut w =
                BufWriter::new(File::create(traces.join(trace_file_name(r.algorithm, r.k0, r.alpha, r.trial)))?);
            t.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}
