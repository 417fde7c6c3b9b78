//! Reference computations shared by the integration tests. They use only
//! nalgebra and the loss definitions written out by hand.
#![allow(dead_code)]

use fedgia::{ClientDataset, FederatedProblem, LossKind, LossModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Random client data with labels suited to `kind`.
pub fn random_client(rng: &mut ChaCha8Rng, d: usize, n: usize, kind: LossKind) -> ClientDataset {
    let a = gaussian_matrix(rng, d, n, 1.0);
    let b = if kind.is_logistic() {
        DVector::from_fn(d, |_, _| f64::from(u8::from(rng.random_bool(0.5))))
    } else {
        gaussian_vector(rng, d, 2.0)
    };
    ClientDataset::new(a, b).unwrap()
}

/// Central differences of `loss` at `x` with a step scaled to each coordinate.
pub fn fd_gradient(loss: &LossModel, data: &ClientDataset, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += h;
        minus[j] -= h;
        (loss.value(data, &plus).unwrap() - loss.value(data, &minus).unwrap()) / (2.0 * h)
    })
}

/// `‖g − g_fd‖ / max(‖g_fd‖, 1)`
pub fn fd_relative_error(loss: &LossModel, data: &ClientDataset, x: &DVector<f64>) -> f64 {
    let g = loss.gradient(data, x).unwrap();
    let fd = fd_gradient(loss, data, x);
    (g - &fd).norm() / fd.norm().max(1.0)
}

/// Minimiser of `(1/m) Σ_i ‖A_i x − b_i‖² / (2 d_i)` from the normal equations.
pub fn least_squares_minimizer(problem: &FederatedProblem) -> DVector<f64> {
    let n = problem.dim();
    let m = problem.num_clients() as f64;
    let mut h = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for c in problem.clients() {
        let w = 1.0 / (m * c.num_samples() as f64);
        h += c.features().transpose() * c.features() * w;
        rhs += c.features().transpose() * c.labels() * w;
    }
    h.lu().solve(&rhs).expect("normal equations are nonsingular")
}

/// `(1/m) Σ_i ‖A_i x − b_i‖² / (2 d_i)` written out directly.
pub fn least_squares_objective(problem: &FederatedProblem, x: &DVector<f64>) -> f64 {
    let m = problem.num_clients() as f64;
    problem
        .clients()
        .iter()
        .map(|c| (c.features() * x - c.labels()).norm_squared() / (2.0 * c.num_samples() as f64))
        .sum::<f64>()
        / m
}

/// Identity features with labels `c_i`, so `f_i(x) = ‖x − c_i‖²/(2n)` and the
/// minimiser of `f` is the mean of the `c_i`.
pub fn quadratic_mean_problem(centres: &[DVector<f64>]) -> FederatedProblem {
    let n = centres[0].len();
    let clients = centres.iter().map(|c| ClientDataset::new(DMatrix::identity(n, n), c.clone()).unwrap()).collect();
    FederatedProblem::new(clients, LossModel::least_squares()).unwrap()
}
