//! FedAvg, FedProx and FedPD trainers behind the same schedule, stopping rule
//! and trace format as FedGiA.

use std::time::Instant;

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;

use crate::data::FederatedProblem;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::fedgia::{aggregate, default_tol, select_clients};
use crate::seed::rng_from_seed;
use crate::trace::{RunStatus, RunTrace, StopRule, TraceRow, DIVERGENCE_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    FedAvg,
    FedProx,
    FedPd,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::FedAvg => "fedavg",
            BaselineKind::FedProx => "fedprox",
            BaselineKind::FedPd => "fedpd",
        }
    }
}

/// Decaying step size `γ_k(a) = a / log₂(k + 2)`.
pub fn step_size(a: f64, k: usize) -> f64 {
    a / ((k + 2) as f64).log2()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineParams {
    pub kind: BaselineKind,
    /// `a` in `γ_k(a)`: the local learning rate for FedAvg and FedProx.
    pub step_base: f64,
    /// FedProx proximal weight.
    pub prox_mu: f64,
    /// Inner gradient steps per local update (FedProx, FedPD).
    pub inner_iters: usize,
    /// FedPD penalty `η`.
    pub eta: f64,
    /// FedPD inner learning rate `η₁ = γ_k(eta1_base)`.
    pub eta1_base: f64,
    pub k0: usize,
    /// Fraction of clients participating each round; 1 means all.
    pub alpha: f64,
    pub stop: StopRule,
    pub seed: u64,
    pub workers: usize,
}

impl BaselineParams {
    /// Settings used in the comparison experiments for the problem's loss.
    pub fn defaults(kind: BaselineKind, problem: &FederatedProblem) -> Self {
        let d = problem.total_samples() as f64;
        let m = problem.num_clients() as f64;
        let loss = problem.loss().kind;
        let logistic = loss.is_logistic();
        let step_base = match (kind, logistic) {
            (_, true) => 0.5 * d / m,
            (BaselineKind::FedProx, false) => 0.001,
            (_, false) => 0.01,
        };
        let (eta, eta1_base) = if logistic { ((d / 50.0).max(400.0), 0.5 * d / m) } else { (1.0, 0.05) };
        Self {
            kind,
            step_base,
            prox_mu: 1e-4,
            inner_iters: 5,
            eta,
            eta1_base,
            k0: 1,
            alpha: 1.0,
            stop: StopRule { tol: default_tol(loss, problem.total_samples()), max_iter: 10_000, max_cr: Some(1000) },
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_base > 0.0) || !(self.eta1_base > 0.0) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        if self.inner_iters == 0 {
            return Err(Error::invalid("inner_iters must be at least 1"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::invalid("eta must be positive"));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(Error::invalid("prox_mu must be nonnegative"));
        }
        if self.k0 == 0 {
            return Err(Error::invalid("k0 must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1]"));
        }
        if !(self.stop.tol > 0.0) || self.stop.max_iter == 0 {
            return Err(Error::invalid("tol and max_iter must be positive"));
        }
        Ok(())
    }
}

/// Local model `x_i`; FedPD additionally keeps a dual `λ_i` and the anchor
/// it is pulled towards. The FedPD dual and anchor move only at aggregation,
/// so local steps within a round refine one primal subproblem.
#[derive(Debug, Clone)]
struct LocalModel {
    x: DVector<f64>,
    lambda: DVector<f64>,
    anchor: DVector<f64>,
}

impl LocalModel {
    fn zeros(n: usize) -> Self {
        Self { x: DVector::zeros(n), lambda: DVector::zeros(n), anchor: DVector::zeros(n) }
    }

    /// What the client sends to the server.
    fn upload(&self, kind: BaselineKind) -> &DVector<f64> {
        match kind {
            BaselineKind::FedPd => &self.anchor,
            BaselineKind::FedAvg | BaselineKind::FedProx => &self.x,
        }
    }
}

struct Trainer<'a> {
    problem: &'a FederatedProblem,
    params: BaselineParams,
    models: Vec<LocalModel>,
    participants: Vec<bool>,
    x_global: DVector<f64>,
    k: usize,
    tau: usize,
    cr: usize,
    rows: Vec<TraceRow>,
    rng: ChaCha8Rng,
    exec: Executor,
    started: Instant,
}

impl<'a> Trainer<'a> {
    fn new(problem: &'a FederatedProblem, params: BaselineParams) -> Result<Self> {
        params.validate()?;
        let m = problem.num_clients();
        let n = problem.dim();
        Ok(Self {
            problem,
            params,
            models: vec![LocalModel::zeros(n); m],
            participants: vec![true; m],
            x_global: DVector::zeros(n),
            k: 0,
            tau: 0,
            cr: 0,
            rows: Vec::new(),
            rng: rng_from_seed(params.seed),
            exec: Executor::new(params.workers)?,
            started: Instant::now(),
        })
    }

    fn communicate(&mut self) -> Result<Option<RunStatus>> {
        let kind = self.params.kind;
        if kind == BaselineKind::FedPd && self.k > 0 {
            let eta = self.params.eta;
            for (c, _) in self.models.iter_mut().zip(&self.participants).filter(|(_, &p)| p) {
                c.lambda.axpy(1.0 / eta, &(&c.x - &c.anchor), 1.0);
                c.anchor = &c.x + &c.lambda * eta;
            }
        }
        let uploads = self.models.iter().zip(&self.participants).filter(|(_, &p)| p).map(|(c, _)| c.upload(kind));
        self.x_global = aggregate(uploads);
        self.tau += 1;
        self.cr += 2;
        for c in &mut self.models {
            match kind {
                BaselineKind::FedPd => c.anchor.copy_from(&self.x_global),
                BaselineKind::FedAvg | BaselineKind::FedProx => c.x.copy_from(&self.x_global),
            }
        }
        let m = self.models.len();
        self.participants.iter_mut().for_each(|p| *p = false);
        for i in select_clients(m, self.params.alpha, &mut self.rng) {
            self.participants[i] = true;
        }

        let error = self.problem.gradient(&self.x_global)?.norm_squared();
        let objective = self.problem.objective(&self.x_global)?;
        self.rows.push(TraceRow {
            k: self.k,
            tau: self.tau,
            cr: self.cr,
            objective,
            error,
            lagrangian: None,
            elapsed_s: self.started.elapsed().as_secs_f64(),
            residuals: None,
        });
        if !objective.is_finite() || objective > DIVERGENCE_THRESHOLD {
            return Ok(Some(RunStatus::Diverged));
        }
        if error <= self.params.stop.tol {
            return Ok(Some(RunStatus::Converged));
        }
        if self.params.stop.max_cr.is_some_and(|cap| self.cr >= cap) {
            return Ok(Some(RunStatus::IterCap));
        }
        Ok(None)
    }

    fn local_step(&mut self) -> Result<()> {
        let p = self.params;
        let k = self.k;
        let problem = self.problem;
        let loss = problem.loss();
        let x_global = &self.x_global;
        let participants = &self.participants;
        self.exec.for_each_mut(&mut self.models, |i, c| {
            if !participants[i] {
                return Ok(());
            }
            let data = &problem.clients()[i];
            match p.kind {
                BaselineKind::FedAvg => {
                    let g = loss.gradient(data, &c.x)?;
                    c.x.axpy(-step_size(p.step_base, k), &g, 1.0);
                }
                BaselineKind::FedProx => {
                    let lr = step_size(p.step_base, k);
                    for _ in 0..p.inner_iters {
                        let mut g = loss.gradient(data, &c.x)?;
                        if p.prox_mu != 0.0 {
                            g.axpy(p.prox_mu, &(&c.x - x_global), 1.0);
                        }
                        c.x.axpy(-lr, &g, 1.0);
                    }
                }
                BaselineKind::FedPd => {
                    let lr = step_size(p.eta1_base, k);
                    for _ in 0..p.inner_iters {
                        let mut g = loss.gradient(data, &c.x)? + &c.lambda;
                        g.axpy(1.0 / p.eta, &(&c.x - &c.anchor), 1.0);
                        c.x.axpy(-lr, &g, 1.0);
                    }
                }
            }
            Ok(())
        })
    }

    fn run(mut self) -> Result<RunTrace> {
        let status = loop {
            if self.k.is_multiple_of(self.params.k0) {
                if let Some(s) = self.communicate()? {
                    break s;
                }
            }
            if self.k >= self.params.stop.max_iter {
                break RunStatus::IterCap;
            }
            self.local_step()?;
            self.k += 1;
        };
        Ok(RunTrace {
            algorithm: self.params.kind.name().to_string(),
            rows: self.rows,
            status,
            final_x: self.x_global,
            iterations: self.k,
        })
    }
}

/// Runs the baseline selected by `params.kind`.
pub fn run_baseline(problem: &FederatedProblem, params: BaselineParams) -> Result<RunTrace> {
    Trainer::new(problem, params)?.run()
}

/// Non-stochastic FedAvg: `k0` local gradient steps between averages.
pub fn run_fedavg(problem: &FederatedProblem, params: BaselineParams) -> Result<RunTrace> {
    run_baseline(problem, BaselineParams { kind: BaselineKind::FedAvg, ..params })
}

/// FedProx with the proximal subproblem solved by `inner_iters` gradient steps.
pub fn run_fedprox(problem: &FederatedProblem, params: BaselineParams) -> Result<RunTrace> {
    run_baseline(problem, BaselineParams { kind: BaselineKind::FedProx, ..params })
}

/// FedPD (gradient-descent oracle, local models persist between rounds).
pub fn run_fedpd(problem: &FederatedProblem, params: BaselineParams) -> Result<RunTrace> {
    run_baseline(problem, BaselineParams { kind: BaselineKind::FedPd, ..params })
}
