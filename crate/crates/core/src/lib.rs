//! Federated learning simulation built around FedGiA, a hybrid of gradient
//! descent and inexact ADMM, with FedAvg, FedProx and FedPD baselines, the
//! least-squares and logistic client losses, a non-i.i.d. synthetic data
//! generator, and a multi-trial experiment harness.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod exec;
pub mod fedgia;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod seed;
pub mod trace;

pub use data::{FederatedProblem, SyntheticSpec};
pub use error::{Error, Result};
pub use fedgia::{AlgoParams, FedGia};
pub use harness::{Algorithm, ExperimentConfig};
pub use loss::{ClientDataset, HessianVariant, LossKind, LossModel};
pub use trace::{RunStatus, RunTrace, StopRule, TraceRow};
