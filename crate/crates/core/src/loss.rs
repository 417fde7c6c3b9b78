//! Per-client loss functions, their gradients, and the curvature bounds used
//! by the quadratic surrogate of the local update.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

/// One client's samples: row `j` of `features` is a sample, `labels[j]` its target.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    features: DMatrix<f64>,
    labels: DVector<f64>,
    gram: OnceLock<DMatrix<f64>>,
    gram_norm: OnceLock<f64>,
}

impl ClientDataset {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::invalid("client dataset needs at least one sample and one feature"));
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch { expected: features.nrows(), got: labels.len() });
        }
        Ok(Self { features, labels, gram: OnceLock::new(), gram_norm: OnceLock::new() })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    /// Sample count `d_i`.
    pub fn num_samples(&self) -> usize {
        self.features.nrows()
    }

    /// Feature dimension `n`.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// `B_i = A_iᵀ A_i`, computed on first use.
    pub fn gram(&self) -> &DMatrix<f64> {
        self.gram.get_or_init(|| self.features.transpose() * &self.features)
    }

    /// `‖B_i‖`, the spectral norm of the Gram matrix.
    pub fn gram_norm(&self) -> f64 {
        *self.gram_norm.get_or_init(|| {
            let s = spectral_norm(self.gram());
            if !s.converged {
                log::warn!("spectral norm of a client Gram matrix did not converge");
            }
            s.value
        })
    }

    /// Checks that every label is exactly 0 or 1.
    pub fn check_binary_labels(&self) -> Result<()> {
        match self.labels.iter().position(|&b| b != 0.0 && b != 1.0) {
            Some(index) => Err(Error::InvalidLabel { index, label: self.labels[index] }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    LeastSquares,
    LogisticL2,
    LogisticNonconvex,
}

impl LossKind {
    pub fn is_logistic(self) -> bool {
        !matches!(self, LossKind::LeastSquares)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::LeastSquares => "ls",
            LossKind::LogisticL2 => "logl2",
            LossKind::LogisticNonconvex => "lognc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ls" | "least-squares" => Some(LossKind::LeastSquares),
            "logl2" | "logistic" => Some(LossKind::LogisticL2),
            "lognc" | "logistic-nonconvex" => Some(LossKind::LogisticNonconvex),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossModel {
    pub kind: LossKind,
    /// Regularization weight; ignored by least squares.
    pub mu: f64,
}

impl LossModel {
    pub fn least_squares() -> Self {
        Self { kind: LossKind::LeastSquares, mu: 0.0 }
    }

    pub fn logistic_l2() -> Self {
        Self { kind: LossKind::LogisticL2, mu: 0.001 }
    }

    pub fn logistic_nonconvex() -> Self {
        Self { kind: LossKind::LogisticNonconvex, mu: 0.01 }
    }

    /// The model with its default regularization weight.
    pub fn with_kind(kind: LossKind) -> Self {
        match kind {
            LossKind::LeastSquares => Self::least_squares(),
            LossKind::LogisticL2 => Self::logistic_l2(),
            LossKind::LogisticNonconvex => Self::logistic_nonconvex(),
        }
    }

    /// Validates that `data` can be used with this model.
    pub fn bind(&self, data: &ClientDataset) -> Result<()> {
        if self.mu < 0.0 {
            return Err(Error::invalid("mu must be nonnegative"));
        }
        if self.kind.is_logistic() {
            data.check_binary_labels()?;
        }
        Ok(())
    }

    pub fn value(&self, data: &ClientDataset, x: &DVector<f64>) -> Result<f64> {
        check_dim(data, x)?;
        let d = data.num_samples() as f64;
        let t = data.features() * x;
        let b = data.labels();
        Ok(match self.kind {
            LossKind::LeastSquares => (t - b).norm_squared() / (2.0 * d),
            LossKind::LogisticL2 => logistic_data_term(&t, b) / d + self.mu / (2.0 * d) * x.norm_squared(),
            LossKind::LogisticNonconvex => {
                let reg: f64 = x.iter().map(|&v| v * v / (1.0 + v * v)).sum();
                logistic_data_term(&t, b) / d + self.mu / (2.0 * d) * reg
            }
        })
    }

    pub fn gradient(&self, data: &ClientDataset, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(data, x)?;
        let d = data.num_samples() as f64;
        let t = data.features() * x;
        let residual = match self.kind {
            LossKind::LeastSquares => t - data.labels(),
            LossKind::LogisticL2 | LossKind::LogisticNonconvex => t.map(sigmoid) - data.labels(),
        };
        let mut g = data.features().tr_mul(&residual) / d;
        match self.kind {
            LossKind::LeastSquares => {}
            LossKind::LogisticL2 => g.axpy(self.mu / d, x, 1.0),
            LossKind::LogisticNonconvex => {
                let scale = self.mu / d;
                for (gl, &xl) in g.iter_mut().zip(x.iter()) {
                    let q = 1.0 + xl * xl;
                    *gl += scale * xl / (q * q);
                }
            }
        }
        Ok(g)
    }

    /// The curvature matrix `H_i` for this loss.
    pub fn curvature_bound(&self, data: &ClientDataset, variant: HessianVariant) -> CurvatureBound {
        let d = data.num_samples() as f64;
        match variant {
            HessianVariant::Gram => {
                let h = match self.kind {
                    LossKind::LeastSquares => data.gram() / d,
                    LossKind::LogisticL2 => data.gram() / (4.0 * d),
                    LossKind::LogisticNonconvex => {
                        let mut h = data.gram() / (4.0 * d);
                        for i in 0..h.nrows() {
                            h[(i, i)] += self.mu / d;
                        }
                        h
                    }
                };
                CurvatureBound::Gram(h)
            }
            HessianVariant::Diagonal => {
                let norm = data.gram_norm();
                let c = match self.kind {
                    LossKind::LeastSquares => norm / d,
                    LossKind::LogisticL2 => norm / (4.0 * d),
                    LossKind::LogisticNonconvex => (norm + 4.0 * self.mu) / (4.0 * d),
                };
                CurvatureBound::Diagonal(c)
            }
        }
    }
}

fn check_dim(data: &ClientDataset, x: &DVector<f64>) -> Result<()> {
    if x.len() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: x.len() });
    }
    Ok(())
}

/// `Σ_j ln(1 + e^{t_j}) − b_j t_j`.
fn logistic_data_term(t: &DVector<f64>, b: &DVector<f64>) -> f64 {
    t.iter().zip(b.iter()).map(|(&tj, &bj)| softplus(tj) - bj * tj).sum()
}

/// `ln(1 + e^t)` without overflow for large `|t|`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HessianVariant {
    Gram,
    Diagonal,
}

/// A PSD curvature matrix: either a full symmetric matrix or `c·I`.
#[derive(Debug, Clone, PartialEq)]
pub enum CurvatureBound {
    Gram(DMatrix<f64>),
    Diagonal(f64),
}

impl CurvatureBound {
    /// `H v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            CurvatureBound::Gram(h) => h * v,
            CurvatureBound::Diagonal(c) => v * *c,
        }
    }

    /// Spectral norm `‖H‖`.
    pub fn norm(&self) -> f64 {
        match self {
            CurvatureBound::Gram(h) => spectral_norm(h).value,
            CurvatureBound::Diagonal(c) => *c,
        }
    }

    /// `‖v‖²_H = ⟨Hv, v⟩`.
    pub fn weighted_norm_sq(&self, v: &DVector<f64>) -> f64 {
        self.apply(v).dot(v)
    }
}
