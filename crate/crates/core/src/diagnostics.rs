//! Post-run monitors that turn the convergence theory into checkable
//! assertions: monotonicity of the Bregman distance to the exact solution,
//! confinement of iterates to the assumption balls, the summed
//! step-weighted residual bound, extrapolation admissibility, and the
//! noise-sweep regularization trend.

use crate::geometry::PrimalVec;
use crate::operators::ForwardProblem;
use crate::penalty::Penalty;
use crate::solver::{kappa_h, theta6_noisefree, IterationTrace, SolverConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the Bregman-distance increments `Theta_k`.
pub const THETA_TOL: f64 = 1e-10;
/// Tolerance for the ball-confinement radii.
pub const BALL_TOL: f64 = 1e-9;
/// Tolerance for the summed step-weighted residual bound.
pub const SUM_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("noise sweep needs at least 3 levels, got {0}")]
    InsufficientLevels(usize),
    #[error("traces come from inconsistent problems: {0}")]
    InconsistentProblems(String),
}

/// Outcome of auditing one trace against the theory.
///
/// Truth-dependent fields are `None` when no exact solution was available
/// to the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub theta5: f64,
    pub theta6_noisefree: f64,
    pub kappa_h: f64,
    /// Steps with `Theta_k` above tolerance (Bregman monotonicity misses).
    pub monotone_violations: Option<usize>,
    pub max_theta_k: Option<f64>,
    /// Right side of the summed bound, `zeta/(zeta-1) * D0 / theta5`.
    pub sum_bound: Option<f64>,
    /// Final value of `sum upsilon_r ||r_r||^s`.
    pub sum_total: f64,
    /// `sum_bound - sum_total`; negative beyond tolerance is a violation.
    pub sum_bound_slack: Option<f64>,
    /// Steps leaving `B(u0, 2 eps)` (iterates) or `B(u0, 3 eps)` (trial points).
    pub ball_violations: usize,
    /// Steps whose accepted extrapolation weight failed an admissibility check.
    pub admissibility_violations: usize,
    /// Partial sum `sum alpha_k ||gamma_0 - gamma_k||`.
    pub alpha_drift_partial: f64,
    /// Partial sum `sum lambda_k ||gamma_k - gamma_{k-1}||`.
    pub lambda_drift_partial: f64,
    /// Closeness condition `D_gamma0(u_dagger, u0) <= c0 eps^p`.
    pub assumption3_check: Option<bool>,
    pub steps: usize,
}

impl TheoryReport {
    /// Number of violated theory invariants (not violated steps).
    pub fn violation_count(&self) -> usize {
        let mut count = 0;
        if self.monotone_violations.unwrap_or(0) > 0 {
            count += 1;
        }
        if self.ball_violations > 0 {
            count += 1;
        }
        if self.admissibility_violations > 0 {
            count += 1;
        }
        if let Some(slack) = self.sum_bound_slack {
            if slack < -SUM_TOL {
                count += 1;
            }
        }
        if self.assumption3_check == Some(false) {
            count += 1;
        }
        count
    }

    pub fn is_clean(&self) -> bool {
        self.violation_count() == 0
    }
}

/// Audit a completed trace. Pure read-only post-processing: auditing the
/// same trace twice yields identical reports.
pub fn audit(
    trace: &IterationTrace,
    pen: &Penalty,
    fp: &ForwardProblem,
    cfg: &SolverConfig,
    truth: Option<&PrimalVec>,
) -> TheoryReport {
    let eps = fp.eps();
    let mut ball_violations = 0;
    let mut admissibility_violations = 0;
    for step in &trace.steps {
        if step.dist_u_to_center > 2.0 * eps + BALL_TOL
            || step.dist_w_to_center > 3.0 * eps + BALL_TOL
        {
            ball_violations += 1;
        }
        if !step.admissible_descent || !step.admissible_ball {
            admissibility_violations += 1;
        }
    }
    let last = trace.steps.last();
    let sum_total = last.map_or(0.0, |s| s.cum_weighted_residual);
    let alpha_drift_partial = last.map_or(0.0, |s| s.cum_alpha_drift);
    let lambda_drift_partial = last.map_or(0.0, |s| s.cum_lambda_drift);

    let (monotone_violations, max_theta_k, sum_bound, sum_bound_slack, assumption3_check) =
        match truth {
            None => (None, None, None, None, None),
            Some(truth) => {
                let mut violations = 0;
                let mut max_theta = f64::NEG_INFINITY;
                for step in trace.steps.iter().skip(1) {
                    if step.theta_k > THETA_TOL {
                        violations += 1;
                    }
                    max_theta = max_theta.max(step.theta_k);
                }
                if trace.steps.len() <= 1 {
                    max_theta = 0.0;
                }
                let d0 = pen.bregman_value(truth, fp.u0(), fp.gamma0());
                let bound = cfg.zeta / (cfg.zeta - 1.0) * d0 / trace.theta5;
                let assumption3 = d0 <= pen.c0() * fp.eps().powf(pen.p()) * (1.0 + 1e-12);
                (
                    Some(violations),
                    Some(max_theta),
                    Some(bound),
                    Some(bound - sum_total),
                    Some(assumption3),
                )
            }
        };

    TheoryReport {
        theta5: trace.theta5,
        theta6_noisefree: theta6_noisefree(cfg, pen, fp),
        kappa_h: kappa_h(cfg, pen, fp),
        monotone_violations,
        max_theta_k,
        sum_bound,
        sum_total,
        sum_bound_slack,
        ball_violations,
        admissibility_violations,
        alpha_drift_partial,
        lambda_drift_partial,
        assumption3_check,
        steps: trace.steps.len(),
    }
}

/// One row of the noise-sweep table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub k_delta: usize,
    pub final_residual: f64,
    pub bregman_to_truth: f64,
    pub norm_error: f64,
}

/// Sweep table ordered by decreasing noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Regularization-trend check on the Bregman column: along decreasing
    /// noise the error may rise by at most `tol_uptick` relative between
    /// adjacent distinct levels. Returns violation descriptions.
    pub fn trend_violations(&self, tol_uptick: f64) -> Vec<String> {
        let mut out = Vec::new();
        for pair in self.rows.windows(2) {
            let (hi, lo) = (&pair[0], &pair[1]);
            if hi.delta == lo.delta {
                continue;
            }
            if lo.bregman_to_truth > hi.bregman_to_truth * (1.0 + tol_uptick) {
                out.push(format!(
                    "error rose from {} at delta {} to {} at delta {}",
                    hi.bregman_to_truth, hi.delta, lo.bregman_to_truth, lo.delta
                ));
            }
        }
        out
    }
}

impl std::fmt::Display for SweepTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:>12}  {:>8}  {:>14}  {:>14}  {:>14}",
            "delta", "k_delta", "residual", "bregman", "norm_error"
        )?;
        for row in &self.rows {
            writeln!(
                f,
                "{:>12.6e}  {:>8}  {:>14.6e}  {:>14.6e}  {:>14.6e}",
                row.delta, row.k_delta, row.final_residual, row.bregman_to_truth, row.norm_error
            )?;
        }
        Ok(())
    }
}

/// Assemble the sweep table for traces of one problem and strategy over at
/// least three noise levels.
pub fn delta_sweep(
    traces: &[&IterationTrace],
    pen: &Penalty,
    fp: &ForwardProblem,
    truth: &PrimalVec,
) -> Result<SweepTable, DiagnosticsError> {
    if traces.len() < 3 {
        return Err(DiagnosticsError::InsufficientLevels(traces.len()));
    }
    let dim = fp.space_u().dim();
    for trace in traces {
        if trace.final_u.len() != dim {
            return Err(DiagnosticsError::InconsistentProblems(format!(
                "trace dimension {} vs problem dimension {dim}",
                trace.final_u.len()
            )));
        }
    }
    let mut rows: Vec<SweepRow> = traces
        .iter()
        .map(|trace| {
            let err = fp.space_u().norm(&trace.final_u.sub(truth));
            SweepRow {
                delta: trace.delta,
                k_delta: trace.stop_index,
                final_residual: trace.final_residual_norm,
                bregman_to_truth: pen.bregman_value(truth, &trace.final_u, &trace.final_gamma),
                norm_error: err,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    Ok(SweepTable { rows })
}
