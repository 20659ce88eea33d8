//! Linear programs: representation, a dense revised simplex solver that reports
//! primal and dual solutions, and the production-distribution recourse/main
//! problem builders.

mod recourse;
mod simplex;

use serde::{Deserialize, Serialize};

pub use recourse::{
    build_main_lp, build_recourse_lp, dedup_scenarios, recourse_value, recourse_value_and_grad,
    solve_main, Instance, MainSolution,
};
pub use simplex::{solve_lp, solve_lp_with, SimplexOptions};

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};

/// Primal feasibility tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-7;
/// Reduced-cost optimality tolerance.
pub const OPTIMALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
}

/// `min cᵀx  s.t.  A x (senses) b,  x ≥ lb`.
///
/// A lower bound of `-inf` marks a free variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpSpec {
    pub objective: Vec<f64>,
    pub matrix: DenseMatrix,
    pub rhs: Vec<f64>,
    pub senses: Vec<Sense>,
    pub lower_bounds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_names: Option<Vec<String>>,
}

impl LpSpec {
    /// Builds a spec with all lower bounds at zero.
    pub fn new(
        objective: Vec<f64>,
        matrix: DenseMatrix,
        rhs: Vec<f64>,
        senses: Vec<Sense>,
    ) -> Self {
        let n = objective.len();
        Self {
            objective,
            matrix,
            rhs,
            senses,
            lower_bounds: vec![0.0; n],
            row_names: None,
            col_names: None,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn n_cols(&self) -> usize {
        self.objective.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.n_rows(), self.n_cols());
        if self.matrix.rows() != m || self.senses.len() != m {
            return Err(Error::Dimension(format!(
                "matrix has {} rows, rhs {m}, senses {}",
                self.matrix.rows(),
                self.senses.len()
            )));
        }
        if self.matrix.cols() != n && m > 0 {
            return Err(Error::Dimension(format!(
                "matrix has {} columns, objective {n}",
                self.matrix.cols()
            )));
        }
        if self.lower_bounds.len() != n {
            return Err(Error::Dimension(format!(
                "{} lower bounds for {n} variables",
                self.lower_bounds.len()
            )));
        }
        if let Some(names) = &self.row_names {
            if names.len() != m {
                return Err(Error::Dimension("row name count".into()));
            }
        }
        if let Some(names) = &self.col_names {
            if names.len() != n {
                return Err(Error::Dimension("column name count".into()));
            }
        }
        let finite = self
            .objective
            .iter()
            .chain(&self.rhs)
            .all(|v| v.is_finite())
            && self.matrix.is_finite()
            && self
                .lower_bounds
                .iter()
                .all(|v| v.is_finite() || *v == f64::NEG_INFINITY);
        if !finite {
            return Err(Error::InvalidArgument("non-finite LP data".into()));
        }
        Ok(())
    }

    /// Largest violation of the row constraints and bounds at `x`, scaled by
    /// `1 + |rhs|` per row.
    pub fn primal_residual(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n_rows() {
            let lhs = dot(self.matrix.row(i), x);
            let b = self.rhs[i];
            let viol = match self.senses[i] {
                Sense::Ge => (b - lhs).max(0.0),
                Sense::Le => (lhs - b).max(0.0),
                Sense::Eq => (lhs - b).abs(),
            };
            worst = worst.max(viol / (1.0 + b.abs()));
        }
        for (xj, lb) in x.iter().zip(&self.lower_bounds) {
            worst = worst.max((lb - xj).max(0.0));
        }
        worst
    }

    /// Largest violation of dual feasibility for multipliers `dual`: sign
    /// conditions per row, and nonnegative reduced costs (zero for free columns).
    pub fn dual_residual(&self, dual: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (i, &pi) in dual.iter().enumerate() {
            let viol = match self.senses[i] {
                Sense::Ge => (-pi).max(0.0),
                Sense::Le => pi.max(0.0),
                Sense::Eq => 0.0,
            };
            worst = worst.max(viol);
        }
        let at = self.matrix.tr_mul_vec(dual);
        for j in 0..self.n_cols() {
            let d = self.objective[j] - at.get(j).copied().unwrap_or(0.0);
            let viol = if self.lower_bounds[j] == f64::NEG_INFINITY {
                d.abs()
            } else {
                (-d).max(0.0)
            };
            worst = worst.max(viol / (1.0 + self.objective[j].abs()));
        }
        worst
    }

    /// Dual objective `πᵀb + Σ lb_j (c_j − πᵀA_j)` over columns with finite bounds.
    pub fn dual_objective(&self, dual: &[f64]) -> f64 {
        let at = self.matrix.tr_mul_vec(dual);
        let bound_term: f64 = (0..self.n_cols())
            .filter(|&j| self.lower_bounds[j].is_finite() && self.lower_bounds[j] != 0.0)
            .map(|j| self.lower_bounds[j] * (self.objective[j] - at[j]))
            .sum();
        dot(dual, &self.rhs) + bound_term
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Result of [`solve_lp`]. Duals follow the minimization convention:
/// `≥` rows have nonnegative multipliers, `≤` rows nonpositive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub objective: f64,
    /// Some basic variable sits at zero in the final basis, so the duals may
    /// not be unique.
    pub degenerate: bool,
    pub iterations: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    pub(crate) fn require_optimal(self) -> Result<Self> {
        match self.status {
            LpStatus::Optimal => Ok(self),
            s => Err(Error::Lp(format!("solver returned {s:?}"))),
        }
    }
}
