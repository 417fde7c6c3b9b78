//! Small dense helpers that nalgebra does not provide directly.

use nalgebra::{DMatrix, DVector};

const POWER_MAX_ITERS: usize = 10_000;
// Stop well below the 1e-8 accuracy target: the Rayleigh quotient change
// underestimates the true error when the top two eigenvalues are close.
const POWER_STOP_TOL: f64 = 1e-13;

/// Outcome of a power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    /// `false` when the iteration cap was hit; `value` is then the best estimate.
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, started
/// from the normalized all-ones vector.
pub fn spectral_norm(b: &DMatrix<f64>) -> SpectralNorm {
    let n = b.nrows();
    assert_eq!(n, b.ncols(), "spectral_norm needs a square matrix");
    if n == 0 {
        return SpectralNorm { value: 0.0, iterations: 0, converged: true };
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for it in 1..=POWER_MAX_ITERS {
        let w = b * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return SpectralNorm { value: 0.0, iterations: it, converged: true };
        }
        v = w / norm;
        if (next - lambda).abs() <= POWER_STOP_TOL * next.abs() {
            return SpectralNorm { value: next.max(0.0), iterations: it, converged: true };
        }
        lambda = next;
    }
    log::warn!("power iteration hit the {POWER_MAX_ITERS}-iteration cap");
    SpectralNorm { value: lambda.max(0.0), iterations: POWER_MAX_ITERS, converged: false }
}
