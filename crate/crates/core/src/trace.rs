//! Per-round run records shared by every trainer.

use std::fmt;
use std::io::{self, Write};

use nalgebra::DVector;

/// Objective values above this abort a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunStatus {
    Converged,
    IterCap,
    Diverged,
}

impl RunStatus {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Converged => 0,
            RunStatus::IterCap => 3,
            RunStatus::Diverged => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::IterCap => "iter_cap",
            RunStatus::Diverged => "diverged",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Termination rule: stop once `‖∇f(x^τ)‖² ≤ tol` at an aggregation, or when
/// either budget runs out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub tol: f64,
    pub max_iter: usize,
    pub max_cr: Option<usize>,
}

/// Algebraic identities checked after an aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InvariantResiduals {
    /// `max_i ‖z_i − x_i − π_i/σ‖ / (1 + ‖z_i‖)`
    pub state_identity: f64,
    /// `‖Σ_i (π_i/σ + x_i − x^τ)‖`
    pub aggregation: f64,
}

/// One row per aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub tau: usize,
    pub cr: usize,
    pub objective: f64,
    pub error: f64,
    pub lagrangian: Option<f64>,
    pub elapsed_s: f64,
    pub residuals: Option<InvariantResiduals>,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub algorithm: String,
    pub rows: Vec<TraceRow>,
    pub status: RunStatus,
    /// The last aggregated global model.
    pub final_x: DVector<f64>,
    /// Local iterations performed.
    pub iterations: usize,
}

pub const TRACE_CSV_HEADER: &str = "k,tau,cr,objective,error,lagrangian,elapsed_s";

impl RunTrace {
    fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn final_objective(&self) -> f64 {
        self.last().map_or(f64::NAN, |r| r.objective)
    }

    pub fn final_error(&self) -> f64 {
        self.last().map_or(f64::NAN, |r| r.error)
    }

    pub fn total_cr(&self) -> usize {
        self.last().map_or(0, |r| r.cr)
    }

    pub fn elapsed_s(&self) -> f64 {
        self.last().map_or(0.0, |r| r.elapsed_s)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{TRACE_CSV_HEADER}")?;
        for r in &self.rows {
            let lag = r.lagrangian.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{},{},{}", r.k, r.tau, r.cr, r.objective, r.error, lag, r.elapsed_s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let trace = RunTrace {
            algorithm: "x".into(),
            rows: vec![TraceRow {
                k: 0,
                tau: 1,
                cr: 2,
                objective: 1.5,
                error: 0.25,
                lagrangian: None,
                elapsed_s: 0.0,
                residuals: None,
            }],
            status: RunStatus::Converged,
            final_x: DVector::zeros(1),
            iterations: 0,
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "k,tau,cr,objective,error,lagrangian,elapsed_s\n0,1,2,1.5,0.25,,0\n"
        );
        assert_eq!(trace.total_cr(), 2);
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(RunStatus::Converged.exit_code(), 0);
        assert_eq!(RunStatus::IterCap.exit_code(), 3);
        assert_eq!(RunStatus::Diverged.exit_code(), 4);
    }
}
