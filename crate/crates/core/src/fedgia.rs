//! FedGiA: selected clients take an inexact-ADMM step against a quadratic
//! surrogate of their loss, the remaining clients take a single gradient
//! assignment, and the server averages `z_i = x_i + π_i/σ` every `k0` steps.

use std::time::Instant;

use nalgebra::{Cholesky, DVector, Dyn};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::data::FederatedProblem;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::loss::{CurvatureBound, HessianVariant, LossKind};
use crate::seed::rng_from_seed;
use crate::trace::{InvariantResiduals, RunStatus, RunTrace, TraceRow, DIVERGENCE_THRESHOLD};

/// Default `t` in `σ = t·r/m` for each loss family.
pub fn default_t(kind: LossKind, total_samples: usize, n: usize) -> f64 {
    match kind {
        LossKind::LeastSquares => 0.15,
        LossKind::LogisticL2 | LossKind::LogisticNonconvex => (4.0 * (total_samples as f64).ln() / n as f64).max(0.025),
    }
}

/// Default stopping tolerance on `‖∇f‖²`.
pub fn default_tol(kind: LossKind, total_samples: usize) -> f64 {
    match kind {
        LossKind::LeastSquares => 1e-7,
        LossKind::LogisticL2 | LossKind::LogisticNonconvex => 5e-6 / total_samples as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgoParams {
    /// Aggregation period.
    pub k0: usize,
    /// Multiplier in `σ = t·r/m`.
    pub t: f64,
    /// Fraction of clients selected for the ADMM step each round.
    pub alpha: f64,
    pub variant: HessianVariant,
    pub tol: f64,
    pub max_iter: usize,
    /// Seed of the client-selection stream.
    pub seed: u64,
    /// Worker threads for client updates; 1 runs inline.
    pub workers: usize,
}

impl AlgoParams {
    /// Parameters with the defaults for `problem`'s loss.
    pub fn for_problem(problem: &FederatedProblem, variant: HessianVariant) -> Self {
        let d = problem.total_samples();
        let kind = problem.loss().kind;
        Self {
            k0: 1,
            t: default_t(kind, d, problem.dim()),
            alpha: 1.0,
            variant,
            tol: default_tol(kind, d),
            max_iter: 10_000,
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k0 == 0 {
            return Err(Error::invalid("k0 must be at least 1"));
        }
        if !(self.t > 0.0) {
            return Err(Error::invalid("t must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1]"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Cached inverse of `H_i/m + σI`; it does not change during a run.
#[derive(Debug, Clone)]
pub enum SolveCache {
    Cholesky(Cholesky<f64, Dyn>),
    /// `1 / (c/m + σ)`
    Scalar(f64),
}

impl SolveCache {
    pub fn new(h: &CurvatureBound, m: usize, sigma: f64) -> Result<Self> {
        let m = m as f64;
        match h {
            CurvatureBound::Gram(h) => {
                let mut a = h / m;
                for i in 0..a.nrows() {
                    a[(i, i)] += sigma;
                }
                Cholesky::new(a)
                    .map(SolveCache::Cholesky)
                    .ok_or_else(|| Error::invalid("H_i/m + sigma*I is not positive definite"))
            }
            CurvatureBound::Diagonal(c) => Ok(SolveCache::Scalar(1.0 / (c / m + sigma))),
        }
    }

    /// `(H_i/m + σI)⁻¹ v`
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SolveCache::Cholesky(ch) => ch.solve(v),
            SolveCache::Scalar(s) => v * *s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub x: DVector<f64>,
    pub pi: DVector<f64>,
    pub z: DVector<f64>,
    pub h: CurvatureBound,
    pub cache: SolveCache,
    /// `(1/m)∇f_i(x^τ)` for the current round.
    pub g_bar: DVector<f64>,
}

impl ClientState {
    /// Inexact ADMM update against the current global model.
    pub fn admm_step(&mut self, x_global: &DVector<f64>, sigma: f64) {
        self.x = x_global - self.cache.solve(&(&self.g_bar + &self.pi));
        self.pi.axpy(sigma, &(&self.x - x_global), 1.0);
        self.z = &self.x + &self.pi / sigma;
    }

    /// Gradient assignment for clients outside the selection set.
    pub fn gd_hold(&mut self, x_global: &DVector<f64>, sigma: f64) {
        self.x.copy_from(x_global);
        self.pi = -&self.g_bar;
        self.z = x_global - &self.g_bar / sigma;
    }

    /// `‖z_i − x_i − π_i/σ‖ / (1 + ‖z_i‖)`
    pub fn state_identity_residual(&self, sigma: f64) -> f64 {
        (&self.z - &self.x - &self.pi / sigma).norm() / (1.0 + self.z.norm())
    }

    /// `‖ḡ_i + π_i + (1/m)H_i(x_i − x^τ)‖`
    pub fn first_order_residual(&self, x_global: &DVector<f64>, m: usize) -> f64 {
        let hx = self.h.apply(&(&self.x - x_global)) / m as f64;
        (&self.g_bar + &self.pi + hx).norm()
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub x_global: DVector<f64>,
    /// Iterations completed.
    pub k: usize,
    /// Aggregations performed.
    pub tau: usize,
    pub selected: Vec<usize>,
    pub sigma: f64,
    pub r: f64,
    pub cr: usize,
}

/// Builds the zero-initialized server and client states.
pub fn initialize(problem: &FederatedProblem, params: &AlgoParams) -> Result<(ServerState, Vec<ClientState>)> {
    params.validate()?;
    let m = problem.num_clients();
    let n = problem.dim();
    let loss = problem.loss();
    let bounds: Vec<CurvatureBound> =
        problem.clients().iter().map(|c| loss.curvature_bound(c, params.variant)).collect();
    let r = bounds.iter().map(CurvatureBound::norm).fold(0.0, f64::max);
    if !(r > 0.0) {
        return Err(Error::ZeroCurvature);
    }
    let sigma = params.t * r / m as f64;
    let clients = bounds
        .into_iter()
        .map(|h| {
            let cache = SolveCache::new(&h, m, sigma)?;
            Ok(ClientState {
                x: DVector::zeros(n),
                pi: DVector::zeros(n),
                z: DVector::zeros(n),
                h,
                cache,
                g_bar: DVector::zeros(n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let server = ServerState { x_global: DVector::zeros(n), k: 0, tau: 0, selected: Vec::new(), sigma, r, cr: 0 };
    Ok((server, clients))
}

/// Mean of the vectors, accumulated in index order.
pub fn aggregate<'a, I>(vectors: I) -> DVector<f64>
where
    I: IntoIterator<Item = &'a DVector<f64>>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().expect("aggregate needs at least one vector");
    let mut sum = first.clone();
    let mut count = 1usize;
    for v in iter {
        sum += v;
        count += 1;
    }
    sum / count as f64
}

/// `round(α·m)` with halves rounded up, clamped to `[1, m]`.
pub fn selection_size(m: usize, alpha: f64) -> usize {
    ((alpha * m as f64 + 0.5).floor() as usize).clamp(1, m)
}

/// Uniform sample of `selection_size(m, alpha)` distinct ids, returned sorted.
pub fn select_clients(m: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let size = selection_size(m, alpha);
    if size == m {
        return (0..m).collect();
    }
    let mut ids = index::sample(rng, m, size).into_vec();
    ids.sort_unstable();
    ids
}

/// Sets `ḡ_i = (1/m)∇f_i(x^τ)` on every client.
pub fn refresh_gradients(
    exec: &Executor,
    clients: &mut [ClientState],
    x_global: &DVector<f64>,
    problem: &FederatedProblem,
) -> Result<()> {
    let m = problem.num_clients() as f64;
    let loss = problem.loss();
    exec.for_each_mut(clients, |i, c| {
        c.g_bar = loss.gradient(&problem.clients()[i], x_global)? / m;
        Ok(())
    })
}

/// `Σ_i (1/m) f_i(x_i) + ⟨x_i − x, π_i⟩ + (σ/2)‖x_i − x‖²`
pub fn augmented_lagrangian(server: &ServerState, clients: &[ClientState], problem: &FederatedProblem) -> Result<f64> {
    let m = problem.num_clients() as f64;
    let mut total = 0.0;
    for (c, data) in clients.iter().zip(problem.clients()) {
        let diff = &c.x - &server.x_global;
        total += problem.loss().value(data, &c.x)? / m + diff.dot(&c.pi) + 0.5 * server.sigma * diff.norm_squared();
    }
    Ok(total)
}

/// Distances from the three stationarity conditions of the consensus problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityResiduals {
    /// `max_i ‖(1/m)∇f_i(x_i) + π_i‖`
    pub grad_res: f64,
    /// `max_i ‖x_i − x‖`
    pub consensus_res: f64,
    /// `‖Σ_i π_i‖`
    pub dual_res: f64,
}

pub fn stationarity_residuals(
    server: &ServerState,
    clients: &[ClientState],
    problem: &FederatedProblem,
) -> Result<StationarityResiduals> {
    let m = problem.num_clients() as f64;
    let mut grad_res: f64 = 0.0;
    let mut consensus_res: f64 = 0.0;
    let mut pi_sum = DVector::zeros(problem.dim());
    for (c, data) in clients.iter().zip(problem.clients()) {
        let g = problem.loss().gradient(data, &c.x)? / m + &c.pi;
        grad_res = grad_res.max(g.norm());
        consensus_res = consensus_res.max((&c.x - &server.x_global).norm());
        pi_sum += &c.pi;
    }
    Ok(StationarityResiduals { grad_res, consensus_res, dual_res: pi_sum.norm() })
}

/// Result of one call to [`FedGia::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Continue,
    Done(RunStatus),
}

/// A FedGiA run that can be advanced one iteration at a time.
pub struct FedGia<'a> {
    problem: &'a FederatedProblem,
    params: AlgoParams,
    server: ServerState,
    clients: Vec<ClientState>,
    selected_mask: Vec<bool>,
    rng: ChaCha8Rng,
    exec: Executor,
    rows: Vec<TraceRow>,
    started: Instant,
    finished: Option<RunStatus>,
}

impl<'a> FedGia<'a> {
    pub fn new(problem: &'a FederatedProblem, params: AlgoParams) -> Result<Self> {
        let started = Instant::now();
        let (server, clients) = initialize(problem, &params)?;
        Ok(Self {
            problem,
            params,
            server,
            selected_mask: vec![false; clients.len()],
            clients,
            rng: rng_from_seed(params.seed),
            exec: Executor::new(params.workers)?,
            rows: Vec::new(),
            started,
            finished: None,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn params(&self) -> &AlgoParams {
        &self.params
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn status(&self) -> Option<RunStatus> {
        self.finished
    }

    /// `L(Z)` at the current state.
    pub fn lagrangian(&self) -> Result<f64> {
        augmented_lagrangian(&self.server, &self.clients, self.problem)
    }

    pub fn stationarity(&self) -> Result<StationarityResiduals> {
        stationarity_residuals(&self.server, &self.clients, self.problem)
    }

    /// Largest first-order residual over all clients.
    pub fn first_order_residual(&self) -> f64 {
        let m = self.clients.len();
        self.clients.iter().map(|c| c.first_order_residual(&self.server.x_global, m)).fold(0.0, f64::max)
    }

    /// Largest state-identity residual over all clients.
    pub fn state_identity_residual(&self) -> f64 {
        self.clients.iter().map(|c| c.state_identity_residual(self.server.sigma)).fold(0.0, f64::max)
    }

    /// `‖Σ_i (π_i/σ + x_i − x^τ)‖`
    pub fn aggregation_residual(&self) -> f64 {
        let sigma = self.server.sigma;
        let mut sum = DVector::zeros(self.problem.dim());
        for c in &self.clients {
            sum += &c.pi / sigma + &c.x - &self.server.x_global;
        }
        sum.norm()
    }

    fn finish(&mut self, status: RunStatus) -> Step {
        self.finished = Some(status);
        Step::Done(status)
    }

    /// Server phase: aggregate, broadcast, reselect, refresh gradients, and
    /// record a trace row. Returns a status when the run should stop.
    fn communicate(&mut self) -> Result<Option<RunStatus>> {
        let m = self.clients.len();
        self.server.x_global = aggregate(self.clients.iter().map(|c| &c.z));
        self.server.tau += 1;
        self.server.cr += 2;
        self.server.selected = select_clients(m, self.params.alpha, &mut self.rng);
        self.selected_mask.iter_mut().for_each(|s| *s = false);
        for &i in &self.server.selected {
            self.selected_mask[i] = true;
        }
        refresh_gradients(&self.exec, &mut self.clients, &self.server.x_global, self.problem)?;

        let grad = aggregate_sum(self.clients.iter().map(|c| &c.g_bar));
        let error = grad.norm_squared();
        let objective = self.problem.objective(&self.server.x_global)?;
        let residuals = InvariantResiduals {
            state_identity: self.state_identity_residual(),
            aggregation: self.aggregation_residual(),
        };
        self.rows.push(TraceRow {
            k: self.server.k,
            tau: self.server.tau,
            cr: self.server.cr,
            objective,
            error,
            lagrangian: Some(self.lagrangian()?),
            elapsed_s: self.started.elapsed().as_secs_f64(),
            residuals: Some(residuals),
        });
        log::debug!("k={} tau={} obj={objective:.6e} err={error:.3e}", self.server.k, self.server.tau);

        if !objective.is_finite() || objective > DIVERGENCE_THRESHOLD {
            return Ok(Some(RunStatus::Diverged));
        }
        if error <= self.params.tol {
            return Ok(Some(RunStatus::Converged));
        }
        Ok(None)
    }

    /// Runs iteration `k`: the server phase when `k` is a multiple of `k0`,
    /// then the local updates.
    pub fn step(&mut self) -> Result<Step> {
        if let Some(s) = self.finished {
            return Ok(Step::Done(s));
        }
        let round_start = self.server.k.is_multiple_of(self.params.k0);
        if round_start {
            if let Some(status) = self.communicate()? {
                return Ok(self.finish(status));
            }
        }
        if self.server.k >= self.params.max_iter {
            return Ok(self.finish(RunStatus::IterCap));
        }

        let sigma = self.server.sigma;
        let x_global = &self.server.x_global;
        let mask = &self.selected_mask;
        self.exec.for_each_mut(&mut self.clients, |i, c| {
            if mask[i] {
                c.admm_step(x_global, sigma);
            } else if round_start {
                // Hold assignments depend only on the round's x^τ and ḡ_i,
                // so the remaining k0 − 1 steps of the round are no-ops.
                c.gd_hold(x_global, sigma);
            }
            Ok(())
        })?;
        self.server.k += 1;
        Ok(Step::Continue)
    }

    /// Steps until the run stops and returns its trace.
    pub fn run_to_end(mut self) -> Result<RunTrace> {
        while self.step()? == Step::Continue {}
        Ok(self.into_trace())
    }

    pub fn into_trace(self) -> RunTrace {
        let name = match self.params.variant {
            HessianVariant::Gram => "fedgia-g",
            HessianVariant::Diagonal => "fedgia-d",
        };
        RunTrace {
            algorithm: name.to_string(),
            rows: self.rows,
            status: self.finished.unwrap_or(RunStatus::IterCap),
            final_x: self.server.x_global,
            iterations: self.server.k,
        }
    }
}

fn aggregate_sum<'a, I>(vectors: I) -> DVector<f64>
where
    I: IntoIterator<Item = &'a DVector<f64>>,
{
    let mut iter = vectors.into_iter();
    let mut sum = iter.next().expect("at least one vector").clone();
    for v in iter {
        sum += v;
    }
    sum
}

/// Runs FedGiA to termination.
pub fn run(problem: &FederatedProblem, params: AlgoParams) -> Result<RunTrace> {
    FedGia::new(problem, params)?.run_to_end()
}
