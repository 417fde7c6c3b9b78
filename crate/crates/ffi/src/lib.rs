//! C ABI over the `fedgia` crate.
//!
//! Every function returns a [`FedgiaStatus`]; on failure a message is kept
//! per thread and read with [`fedgia_last_error_message`]. Problems and traces
//! are opaque handles created by this library and released with their
//! `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedgia::data::{generate_linear_noniid, load_dataset, partition_dataset, DataFormat, LoadOptions};
use fedgia::harness::{run_algorithm_with_workers, Algorithm, ExperimentConfig};
use fedgia::{ClientDataset, FederatedProblem, LossKind, LossModel, RunStatus, RunTrace, SyntheticSpec};
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedgiaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    OutOfRange = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedgiaLoss {
    LeastSquares = 0,
    LogisticL2 = 1,
    LogisticNonconvex = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedgiaAlgorithm {
    FedAvg = 0,
    FedProx = 1,
    FedPd = 2,
    FedGiaDiagonal = 3,
    FedGiaGram = 4,
}

/// Termination reason; the values match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedgiaRunStatus {
    Converged = 0,
    IterCap = 3,
    Diverged = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedgiaFormat {
    Csv = 0,
    Libsvm = 1,
}

/// Run settings. Non-positive `t` and `tol` and a zero `max_iter` select the
/// loss defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedgiaRunConfig {
    pub algorithm: FedgiaAlgorithm,
    pub k0: usize,
    pub alpha: f64,
    pub t: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub workers: usize,
}

/// One aggregation round. `lagrangian` is NaN for the baselines.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FedgiaTraceRow {
    pub k: usize,
    pub tau: usize,
    pub cr: usize,
    pub objective: f64,
    pub error: f64,
    pub lagrangian: f64,
    pub elapsed_s: f64,
}

/// Opaque federated problem.
pub struct FedgiaProblem(FederatedProblem);

/// Opaque run result.
pub struct FedgiaTrace(RunTrace);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(FedgiaStatus, String);

impl From<fedgia::Error> for Failure {
    fn from(e: fedgia::Error) -> Self {
        let status = match e {
            fedgia::Error::Io(_) => FedgiaStatus::Io,
            _ => FedgiaStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FedgiaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FedgiaStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FedgiaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedgiaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FedgiaStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or points to a live value of type `T`.
unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `p` is null or valid for `len` reads.
unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: `out` is non-null and the caller promises it is writable.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn loss_model(loss: FedgiaLoss) -> LossModel {
    LossModel::with_kind(match loss {
        FedgiaLoss::LeastSquares => LossKind::LeastSquares,
        FedgiaLoss::LogisticL2 => LossKind::LogisticL2,
        FedgiaLoss::LogisticNonconvex => LossKind::LogisticNonconvex,
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedgia_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fedgia_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Generates the synthetic non-i.i.d. regression problem and binds `loss`.
/// Logistic losses relabel the targets by sign.
#[no_mangle]
pub extern "C" fn fedgia_problem_generate(
    m: usize,
    n: usize,
    d_min: usize,
    d_max: usize,
    seed: u64,
    loss: FedgiaLoss,
    out: *mut *mut FedgiaProblem,
) -> FedgiaStatus {
    guard(|| {
        let spec = SyntheticSpec { m, n, d_min, d_max, seed };
        let problem = generate_linear_noniid(&spec)?;
        let model = loss_model(loss);
        let problem = if model.kind.is_logistic() {
            let clients = problem
                .clients()
                .iter()
                .map(|c| ClientDataset::new(c.features().clone(), c.labels().map(|b| f64::from(u8::from(b > 0.0)))))
                .collect::<fedgia::Result<Vec<_>>>()?;
            FederatedProblem::new(clients, model)?
        } else {
            problem.with_loss(model)?
        };
        write_out(out, FedgiaProblem(problem))
    })
}

/// Builds a problem from dense data. `features` holds all samples row-major
/// (`sum(sizes)` rows of `n` values), client after client; `labels` holds
/// `sum(sizes)` values in the same order.
///
/// # Safety
/// `sizes` must be valid for `m` reads, `features` for `sum(sizes)·n` reads
/// and `labels` for `sum(sizes)` reads.
#[no_mangle]
pub unsafe extern "C" fn fedgia_problem_from_dense(
    m: usize,
    sizes: *const usize,
    n: usize,
    features: *const f64,
    labels: *const f64,
    loss: FedgiaLoss,
    out: *mut *mut FedgiaProblem,
) -> FedgiaStatus {
    guard(|| {
        if m == 0 || n == 0 {
            return Err(invalid("m and n must be positive"));
        }
        let sizes = as_slice(sizes, m, "sizes")?;
        let total = sizes
            .iter()
            .try_fold(0usize, |acc, &d| acc.checked_add(d))
            .ok_or_else(|| invalid("sample count overflows"))?;
        let len = total.checked_mul(n).ok_or_else(|| invalid("feature count overflows"))?;
        let features = as_slice(features, len, "features")?;
        let labels = as_slice(labels, total, "labels")?;
        let mut clients = Vec::with_capacity(m);
        let mut row = 0;
        for &d in sizes {
            if d == 0 {
                return Err(invalid("every client needs at least one sample"));
            }
            let a = DMatrix::from_row_slice(d, n, &features[row * n..(row + d) * n]);
            let b = DVector::from_column_slice(&labels[row..row + d]);
            clients.push(ClientDataset::new(a, b)?);
            row += d;
        }
        write_out(out, FedgiaProblem(FederatedProblem::new(clients, loss_model(loss))?))
    })
}

/// Loads a CSV (label in the last column) or LIBSVM file and splits it
/// randomly across `m` clients.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fedgia_problem_load(
    path: *const c_char,
    format: FedgiaFormat,
    m: usize,
    seed: u64,
    loss: FedgiaLoss,
    out: *mut *mut FedgiaProblem,
) -> FedgiaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let format = match format {
            FedgiaFormat::Csv => DataFormat::Csv,
            FedgiaFormat::Libsvm => DataFormat::Libsvm,
        };
        let (features, mut labels) = load_dataset(Path::new(path), &LoadOptions::new(format))?;
        let model = loss_model(loss);
        if model.kind.is_logistic() {
            fedgia::data::bind_logistic_labels(&mut labels)?;
        }
        write_out(out, FedgiaProblem(partition_dataset(&features, &labels, m, seed, model)?))
    })
}

/// # Safety
/// `problem` is null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn fedgia_problem_free(problem: *mut FedgiaProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Writes client count, feature dimension and total sample count.
///
/// # Safety
/// `problem` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn fedgia_problem_shape(
    problem: *const FedgiaProblem,
    m: *mut usize,
    n: *mut usize,
    total_samples: *mut usize,
) -> FedgiaStatus {
    guard(|| {
        let p = &as_ref(problem, "problem")?.0;
        for (dst, v) in [(m, p.num_clients()), (n, p.dim()), (total_samples, p.total_samples())] {
            if !dst.is_null() {
                *dst = v;
            }
        }
        Ok(())
    })
}

/// Evaluates `f(x) = (1/m) Σ f_i(x)`.
///
/// # Safety
/// `problem` must be a live handle, `x` valid for `len` reads, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedgia_problem_objective(
    problem: *const FedgiaProblem,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> FedgiaStatus {
    guard(|| {
        let p = &as_ref(problem, "problem")?.0;
        let x = DVector::from_column_slice(as_slice(x, len, "x")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = p.objective(&x)?;
        Ok(())
    })
}

/// Default settings for `algorithm`: `k0 = 1`, `alpha = 1`, loss defaults,
/// seed 0, one worker.
#[no_mangle]
pub extern "C" fn fedgia_run_config_default(algorithm: FedgiaAlgorithm) -> FedgiaRunConfig {
    FedgiaRunConfig { algorithm, k0: 1, alpha: 1.0, t: 0.0, tol: 0.0, max_iter: 0, seed: 0, workers: 1 }
}

/// Runs one trainer to termination.
///
/// # Safety
/// `problem` and `config` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedgia_run(
    problem: *const FedgiaProblem,
    config: *const FedgiaRunConfig,
    out: *mut *mut FedgiaTrace,
) -> FedgiaStatus {
    guard(|| {
        let p = &as_ref(problem, "problem")?.0;
        let c = *as_ref(config, "config")?;
        if c.workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        let algorithm = match c.algorithm {
            FedgiaAlgorithm::FedAvg => Algorithm::FedAvg,
            FedgiaAlgorithm::FedProx => Algorithm::FedProx,
            FedgiaAlgorithm::FedPd => Algorithm::FedPd,
            FedgiaAlgorithm::FedGiaDiagonal => Algorithm::FedGiaD,
            FedgiaAlgorithm::FedGiaGram => Algorithm::FedGiaG,
        };
        let cfg = ExperimentConfig {
            t: (c.t > 0.0).then_some(c.t),
            tol: (c.tol > 0.0).then_some(c.tol),
            max_iter: (c.max_iter > 0).then_some(c.max_iter),
            ..ExperimentConfig::default()
        };
        let trace = run_algorithm_with_workers(p, algorithm, c.k0, c.alpha, c.seed, &cfg, c.workers)?;
        write_out(out, FedgiaTrace(trace))
    })
}

/// # Safety
/// `trace` is null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn fedgia_trace_free(trace: *mut FedgiaTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// # Safety
/// `trace` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedgia_trace_status(trace: *const FedgiaTrace, out: *mut FedgiaRunStatus) -> FedgiaStatus {
    guard(|| {
        let t = &as_ref(trace, "trace")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = match t.status {
            RunStatus::Converged => FedgiaRunStatus::Converged,
            RunStatus::IterCap => FedgiaRunStatus::IterCap,
            RunStatus::Diverged => FedgiaRunStatus::Diverged,
        };
        Ok(())
    })
}

/// # Safety
/// `trace` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedgia_trace_num_rows(trace: *const FedgiaTrace, out: *mut usize) -> FedgiaStatus {
    guard(|| {
        let t = &as_ref(trace, "trace")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = t.rows.len();
        Ok(())
    })
}

/// # Safety
/// `trace` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedgia_trace_row(
    trace: *const FedgiaTrace,
    index: usize,
    out: *mut FedgiaTraceRow,
) -> FedgiaStatus {
    guard(|| {
        let t = &as_ref(trace, "trace")?.0;
        let r = t.rows.get(index).ok_or_else(|| {
            Failure(FedgiaStatus::OutOfRange, format!("row {index} out of range for {} rows", t.rows.len()))
        })?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = FedgiaTraceRow {
            k: r.k,
            tau: r.tau,
            cr: r.cr,
            objective: r.objective,
            error: r.error,
            lagrangian: r.lagrangian.unwrap_or(f64::NAN),
            elapsed_s: r.elapsed_s,
        };
        Ok(())
    })
}

/// Copies the final global model into `buf`. `*written` receives the model
/// length; a `len` that is too small fails with `OUT_OF_RANGE` after setting
/// `*written`, so a first call with `len = 0` queries the size.
///
/// # Safety
/// `trace` must be live, `buf` valid for `len` writes, `written` writable.
#[no_mangle]
pub unsafe extern "C" fn fedgia_trace_final_x(
    trace: *const FedgiaTrace,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> FedgiaStatus {
    guard(|| {
        let t = &as_ref(trace, "trace")?.0;
        if written.is_null() {
            return Err(null("written"));
        }
        let x = t.final_x.as_slice();
        *written = x.len();
        if len < x.len() {
            return Err(Failure(FedgiaStatus::OutOfRange, format!("buffer holds {len}, model has {}", x.len())));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(x.as_ptr(), buf, x.len());
        Ok(())
    })
}
