//! Two-point gradient iteration for `F(u) = v` with a p-convex penalty.
//!
//! One step extrapolates in the dual space, pulls back through the
//! conjugate gradient, and applies a regularized gradient update:
//!
//! ```text
//! Xi_k      = gamma_k + lambda_k (gamma_k - gamma_{k-1})
//! w_k       = grad phi*(Xi_k)
//! gamma_k+1 = (1 - alpha_k) Xi_k - upsilon_k L(w_k)* J_s(F(w_k) - v_delta) + alpha_k Xi_0
//! u_k+1     = grad phi*(gamma_k+1)
//! ```
//!
//! The step size `upsilon_k` follows the residual-driven rule with the
//! `theta` constants, `alpha_k` the drift rule toward the start functional,
//! and `lambda_k` one of three strategies: identically zero (plain
//! iteratively regularized Landweber), a noise-scaled Nesterov cap, or a
//! discrete backtracking search over a summable trial sequence. Iteration
//! stops at the first `w_k` whose residual falls below `tau * delta`.

use crate::geometry::{DualVec, PrimalVec};
use crate::operators::ForwardProblem;
use crate::penalty::Penalty;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("descent margin is not positive: {0}")]
    NonpositiveMargin(Theta5Breakdown),
    #[error("iterate became non-finite at step {k}")]
    NumericBlowup { k: usize },
    #[error("noise level must be nonnegative, got {0}")]
    NegativeNoise(f64),
    #[error("data vector has dimension {got}, expected {expected}")]
    DataDimension { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStrategy {
    /// `lambda_k = 0`: iteratively regularized Landweber iteration.
    Zero,
    /// Noise-scaled candidate capped by the Nesterov sequence `k/(k+sigma)`.
    Nesterov,
    /// Discrete backtracking search over a summable trial sequence.
    Dbts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaStrategy {
    /// `alpha_k = 0`: no drift toward the start functional.
    Zero,
    /// The capped drift rule built from `theta4` and `theta2_k`.
    RuleA,
}

/// Constants of the iteration. Defaults are chosen so that the descent
/// margin stays positive on the bundled benchmark problems.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Discrepancy constant `tau > 1`.
    pub tau: f64,
    /// Residual gauge exponent `s > 1` of the data-space duality map.
    pub s: f64,
    /// Step-size numerator constant `theta1 > 0`.
    pub theta1: f64,
    /// Cap `theta2_bar < theta1` for the per-step `theta2_k` selection.
    pub theta2_bar: f64,
    /// Step-size ceiling constant `theta3 > 0`.
    pub theta3: f64,
    /// Drift-rule constant `theta4 > 0`.
    pub theta4: f64,
    /// Admissibility margin `zeta > 1`.
    pub zeta: f64,
    /// Nesterov offset `sigma >= 3` in the cap `k/(k+sigma)`.
    pub sigma_nesterov: f64,
    pub lambda_strategy: LambdaStrategy,
    pub alpha_strategy: AlphaStrategy,
    /// Iteration cap.
    pub k_max: usize,
    /// Probe budget of the backtracking search.
    pub j_max: usize,
    /// Scale of the summable trial sequence `h(i) = h_scale/(i+1)^2`.
    pub h_scale: f64,
    /// Scale of the noise-free drift cap `alpha_k <= scale/(k+1)^2`.
    pub alpha_summable_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: 5.0,
            s: 2.0,
            theta1: 0.2,
            theta2_bar: 0.1,
            theta3: 1.0,
            theta4: 0.05,
            zeta: 2.0,
            sigma_nesterov: 3.0,
            lambda_strategy: LambdaStrategy::Zero,
            alpha_strategy: AlphaStrategy::RuleA,
            k_max: 5000,
            j_max: 5,
            h_scale: 1.0,
            alpha_summable_scale: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidConfig(msg));
        if !(self.tau > 1.0) {
            return bad(format!("tau must exceed 1, got {}", self.tau));
        }
        if !(self.s > 1.0) {
            return bad(format!("s must exceed 1, got {}", self.s));
        }
        if !(self.theta1 > 0.0) {
            return bad(format!("theta1 must be positive, got {}", self.theta1));
        }
        if !(self.theta2_bar > 0.0 && self.theta2_bar < self.theta1) {
            return bad(format!(
                "theta2_bar must lie in (0, theta1), got {}",
                self.theta2_bar
            ));
        }
        if !(self.theta3 > 0.0) {
            return bad(format!("theta3 must be positive, got {}", self.theta3));
        }
        if !(self.theta4 > 0.0) {
            return bad(format!("theta4 must be positive, got {}", self.theta4));
        }
        if !(self.zeta > 1.0) {
            return bad(format!("zeta must exceed 1, got {}", self.zeta));
        }
        if !(self.sigma_nesterov >= 3.0) {
            return bad(format!(
                "sigma_nesterov must be at least 3, got {}",
                self.sigma_nesterov
            ));
        }
        if self.j_max == 0 {
            return bad("j_max must be at least 1".into());
        }
        if !(self.h_scale > 0.0) {
            return bad(format!("h_scale must be positive, got {}", self.h_scale));
        }
        if !(self.alpha_summable_scale > 0.0) {
            return bad(format!(
                "alpha_summable_scale must be positive, got {}",
                self.alpha_summable_scale
            ));
        }
        Ok(())
    }
}

/// `x^e` with exact handling of the exponents that dominate in practice.
pub(crate) fn fpow(x: f64, e: f64) -> f64 {
    if e == 1.0 {
        x
    } else if e == 2.0 {
        x * x
    } else if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// The descent margin and its contributing terms,
/// `theta5 = 1 - stability_term - eta - gauge_term - tau_term`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Theta5Breakdown {
    pub value: f64,
    /// `(C/c0)^{1/p} * theta4`, the stability-times-drift contribution.
    pub stability_term: f64,
    /// Tangential cone constant.
    pub eta: f64,
    /// `theta1^{p*-1} / (p* (2 c0)^{p*-1})`, the step-gauge contribution.
    pub gauge_term: f64,
    /// `(stability_term + 1 + eta) / tau`, the noise-threshold contribution.
    pub tau_term: f64,
}

impl std::fmt::Display for Theta5Breakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let dominant = [
            ("stability term", self.stability_term),
            ("tangential cone constant eta", self.eta),
            ("theta1 gauge term", self.gauge_term),
            ("tau term", self.tau_term),
        ]
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(name, _)| name)
        .unwrap_or("none");
        write!(
            f,
            "theta5 = {} (1 - stability term {} - eta {} - theta1 gauge term {} - tau term {}); \
             largest subtracted term: {dominant}",
            self.value, self.stability_term, self.eta, self.gauge_term, self.tau_term
        )
    }
}

/// Descent margin from raw constants.
#[allow(clippy::too_many_arguments)]
pub fn theta5_value(
    p: f64,
    p_star: f64,
    c0: f64,
    stability: f64,
    eta: f64,
    theta1: f64,
    theta4: f64,
    tau: f64,
) -> Theta5Breakdown {
    let stability_term = fpow(stability / c0, 1.0 / p) * theta4;
    let gauge_term = fpow(theta1, p_star - 1.0) / (p_star * fpow(2.0 * c0, p_star - 1.0));
    let tau_term = (stability_term + 1.0 + eta) / tau;
    Theta5Breakdown {
        value: 1.0 - stability_term - eta - gauge_term - tau_term,
        stability_term,
        eta,
        gauge_term,
        tau_term,
    }
}

/// Descent margin of a configured problem.
pub fn theta5(cfg: &SolverConfig, pen: &Penalty, fp: &ForwardProblem) -> Theta5Breakdown {
    theta5_value(
        pen.p(),
        pen.p_star(),
        pen.c0(),
        fp.stability(),
        fp.eta(),
        cfg.theta1,
        cfg.theta4,
        cfg.tau,
    )
}

/// Noise-free descent margin: the same expression without the tau term.
pub fn theta6_noisefree(cfg: &SolverConfig, pen: &Penalty, fp: &ForwardProblem) -> f64 {
    let b = theta5(cfg, pen, fp);
    b.value + b.tau_term
}

/// Constant of the noise-scaled extrapolation candidate
/// `lambda_k = min(kappa * delta^p / ||dgamma||^{p*}, k/(k+sigma))`.
pub fn kappa_h(cfg: &SolverConfig, pen: &Penalty, fp: &ForwardProblem) -> f64 {
    let p = pen.p();
    let p_star = pen.p_star();
    let c0 = pen.c0();
    let t5 = theta5(cfg, pen, fp).value;
    let gap = fpow(cfg.theta1, p_star - 1.0) - fpow(cfg.theta2_bar, p_star - 1.0);
    let lower =
        (fpow(gap, 1.0 / (p_star - 1.0)) / (2.0 * fpow(fp.deriv_bound(), p))).min(cfg.theta3);
    p_star * fpow(2.0 * c0, p_star - 1.0) * t5 * fpow(cfg.tau, p) / (2.0 * cfg.zeta) * lower
}

/// Acceptance constant of the backtracking search,
/// `theta7 = p* (2 c0)^{p*-1} theta5 / zeta`.
pub fn theta7(cfg: &SolverConfig, pen: &Penalty, fp: &ForwardProblem) -> f64 {
    let p_star = pen.p_star();
    p_star * fpow(2.0 * pen.c0(), p_star - 1.0) * theta5(cfg, pen, fp).value / cfg.zeta
}

/// Per-step `theta2_k`: the largest value allowed by the cap
/// `theta2_k t_k^{p*} <= theta2_bar^{p*-1} ||r_k||^s`, or zero while
/// `t_k = 0`.
pub fn select_theta2k(theta2_bar: f64, p_star: f64, s: f64, residual_norm: f64, t_k: f64) -> f64 {
    if t_k > 0.0 {
        fpow(theta2_bar, p_star - 1.0) * fpow(residual_norm, s) / fpow(t_k, p_star)
    } else {
        0.0
    }
}

/// Step size rule: zero once the residual reaches the discrepancy
/// threshold, otherwise the minimum of the gauge-normalized step and the
/// ceiling `theta3 ||r||^{p-s}`.
#[allow(clippy::too_many_arguments)]
pub fn step_size(
    theta1: f64,
    theta3: f64,
    p: f64,
    p_star: f64,
    s: f64,
    tau_delta: f64,
    residual_norm: f64,
    theta2_k: f64,
    t_k: f64,
    adjoint_dual_norm: f64,
) -> f64 {
    if residual_norm <= tau_delta {
        return 0.0;
    }
    let radicand =
        fpow(theta1, p_star - 1.0) * fpow(residual_norm, s) - theta2_k * fpow(t_k, p_star);
    assert!(
        radicand >= 0.0,
        "negative step-size radicand signals a theta2 selection bug"
    );
    let normalized = if adjoint_dual_norm == 0.0 {
        f64::INFINITY
    } else {
        0.5 * fpow(radicand, 1.0 / (p_star - 1.0)) / fpow(adjoint_dual_norm, p)
    };
    normalized.min(theta3 * fpow(residual_norm, p - s))
}

/// Drift weight `alpha_k`: zero when the step size or `t_k` vanish,
/// otherwise the capped minimum of the two admissible expressions, with an
/// extra summable cap in noise-free mode.
#[allow(clippy::too_many_arguments)]
pub fn select_alpha(
    theta4: f64,
    p_star: f64,
    s: f64,
    upsilon: f64,
    residual_norm: f64,
    theta2_k: f64,
    t_k: f64,
    noise_free_cap: Option<f64>,
) -> f64 {
    if upsilon == 0.0 || t_k == 0.0 {
        return 0.0;
    }
    let first = theta4 * upsilon * fpow(residual_norm, s - 1.0) / t_k;
    let second = 2f64.powf((1.0 - p_star) / p_star) * fpow(theta2_k * upsilon, 1.0 / p_star);
    let mut alpha = first.min(second).min(1.0);
    if let Some(cap) = noise_free_cap {
        alpha = alpha.min(cap);
    }
    alpha
}

/// Both extrapolation admissibility inequalities for a candidate `lambda`:
/// the descent-preserving bound against `theta5 upsilon ||r||^s / zeta` and
/// the ball-preserving bound against `c0 eps^p`.
#[allow(clippy::too_many_arguments)]
pub fn lambda_admissibility(
    lambda: f64,
    delta_gamma_norm: f64,
    p_star: f64,
    c0: f64,
    theta5: f64,
    upsilon: f64,
    residual_norm: f64,
    s: f64,
    zeta: f64,
    eps: f64,
    p: f64,
) -> (bool, bool) {
    let lhs = (lambda + fpow(lambda, p_star)) * fpow(delta_gamma_norm, p_star)
        / (p_star * fpow(2.0 * c0, p_star - 1.0));
    let descent_bound = theta5 * upsilon * fpow(residual_norm, s) / zeta;
    let ball_bound = c0 * fpow(eps, p);
    (lhs <= descent_bound, lhs <= ball_bound)
}

/// Largest `lambda <= candidate` satisfying the ball-preserving bound
/// `(lambda + lambda^{p*}) ||dgamma||^{p*} <= p* (2 c0)^{p*-1} c0 eps^p`.
pub fn clamp_lambda_ball(
    candidate: f64,
    delta_gamma_norm: f64,
    p_star: f64,
    c0: f64,
    eps: f64,
    p: f64,
) -> f64 {
    if candidate <= 0.0 || delta_gamma_norm == 0.0 {
        return candidate.max(0.0);
    }
    let budget = p_star * fpow(2.0 * c0, p_star - 1.0) * c0 * fpow(eps, p);
    let lhs = |lambda: f64| (lambda + fpow(lambda, p_star)) * fpow(delta_gamma_norm, p_star);
    if lhs(candidate) <= budget {
        return candidate;
    }
    let mut lo = 0.0;
    let mut hi = candidate;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lhs(mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Noise-scaled extrapolation candidate before the ball clamp:
/// `min(kappa delta^p / ||dgamma||^{p*}, k/(k+sigma))`, degenerating to the
/// Nesterov cap alone when the dual increment vanishes.
pub fn lambda_noise_scaled(
    k: usize,
    sigma_nesterov: f64,
    delta: f64,
    p: f64,
    p_star: f64,
    kappa: f64,
    delta_gamma_norm: f64,
) -> f64 {
    let kf = k as f64;
    let nesterov_cap = kf / (kf + sigma_nesterov);
    if delta_gamma_norm == 0.0 {
        return nesterov_cap;
    }
    (kappa * fpow(delta, p) / fpow(delta_gamma_norm, p_star)).min(nesterov_cap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Discrepancy,
    KMax,
    Theta5Violation,
}

/// Everything observed at one iteration step.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub k: usize,
    pub residual_norm: f64,
    pub upsilon: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub t_k: f64,
    /// Bregman distance from the exact solution to `u_k`; NaN when no exact
    /// solution is attached to the problem.
    pub bregman_to_truth: f64,
    /// Increment of the Bregman distance, zero at `k = 0`.
    pub theta_k: f64,
    pub theta2_k: f64,
    pub i_dbts: u64,
    /// `||gamma_k - gamma_{k-1}||` in the dual norm, zero at `k = 0`.
    pub delta_gamma_norm: f64,
    /// `||gamma_0 - gamma_k||` in the dual norm.
    pub gamma_drift_from_start: f64,
    pub dist_u_to_center: f64,
    pub dist_w_to_center: f64,
    pub admissible_descent: bool,
    pub admissible_ball: bool,
    /// Running sum of `upsilon_r ||r_r||^s`.
    pub cum_weighted_residual: f64,
    /// Running sum of `alpha_r ||gamma_0 - gamma_r||`.
    pub cum_alpha_drift: f64,
    /// Running sum of `lambda_r ||gamma_r - gamma_{r-1}||`.
    pub cum_lambda_drift: f64,
}

/// Full record of one solver run. Steps are appended in order; the stop
/// index equals the final step's `k`.
#[derive(Clone, Debug)]
pub struct IterationTrace {
    pub steps: Vec<TraceStep>,
    pub stop_index: usize,
    pub stop_reason: StopReason,
    pub delta: f64,
    pub tau_delta: f64,
    pub theta5: f64,
    pub final_u: PrimalVec,
    pub final_gamma: DualVec,
    pub final_residual_norm: f64,
}

pub struct Solver<'a> {
    cfg: &'a SolverConfig,
    pen: &'a Penalty,
    fp: &'a ForwardProblem,
}

impl<'a> Solver<'a> {
    pub fn new(cfg: &'a SolverConfig, pen: &'a Penalty, fp: &'a ForwardProblem) -> Self {
        Self { cfg, pen, fp }
    }

    pub fn theta5(&self) -> Theta5Breakdown {
        theta5(self.cfg, self.pen, self.fp)
    }

    fn extrapolate(
        &self,
        gamma_cur: &DualVec,
        gamma_prev: &DualVec,
        lambda: f64,
    ) -> (DualVec, PrimalVec) {
        let xi = if lambda == 0.0 {
            gamma_cur.clone()
        } else {
            DualVec::from_raw(
                gamma_cur
                    .coords()
                    .iter()
                    .zip(gamma_prev.coords())
                    .map(|(g, gp)| g + lambda * (g - gp))
                    .collect(),
            )
        };
        let w = self.pen.conjugate_grad(&xi);
        (xi, w)
    }

    fn residual(&self, w: &PrimalVec, v_delta: &PrimalVec) -> PrimalVec {
        self.fp.apply(w).sub(v_delta)
    }

    /// One backtracking search for `lambda_k`. Returns the accepted value
    /// and the advanced trial index `i_k`.
    #[allow(clippy::too_many_arguments)]
    fn dbts_select(
        &self,
        k: usize,
        gamma_cur: &DualVec,
        gamma_prev: &DualVec,
        delta_gamma_norm: f64,
        xi0: &DualVec,
        v_delta: &PrimalVec,
        delta: f64,
        tau_delta: f64,
        i_prev: u64,
        theta7: f64,
        kappa: f64,
    ) -> Result<(f64, u64), SolverError> {
        if k == 0 {
            return Ok((0.0, 0));
        }
        if delta_gamma_norm == 0.0 {
            return Ok((0.0, i_prev + 1));
        }
        let p = self.pen.p();
        let p_star = self.pen.p_star();
        let c0 = self.pen.c0();
        let s = self.cfg.s;
        let eps = self.fp.eps();
        let kf = k as f64;
        let nesterov_cap = kf / (kf + self.cfg.sigma_nesterov);
        let ball_cap =
            p_star * fpow(2.0 * c0, p_star) * fpow(eps, p) / (4.0 * fpow(delta_gamma_norm, p_star));
        let trial = |i: u64| -> f64 {
            let step = (i + 1) as f64;
            (self.cfg.h_scale / (step * step) / delta_gamma_norm)
                .min(ball_cap)
                .min(nesterov_cap)
        };
        for j in 1..=self.cfg.j_max as u64 {
            let lambda = trial(i_prev + j);
            let (xi, w) = self.extrapolate(gamma_cur, gamma_prev, lambda);
            let residual = self.residual(&w, v_delta);
            let rn = self.fp.space_v().norm(&residual);
            if !rn.is_finite() {
                return Err(SolverError::NumericBlowup { k });
            }
            if rn <= tau_delta {
                return Ok((0.0, i_prev + j));
            }
            let t_k = self.fp.space_u().dual_norm(&xi.sub(xi0));
            let theta2_k = select_theta2k(self.cfg.theta2_bar, p_star, s, rn, t_k);
            let jres = self.fp.space_v().duality_map(s, &residual);
            let grad = self.fp.deriv_adjoint(&w, &jres);
            let gn = self.fp.space_u().dual_norm(&grad);
            let upsilon = step_size(
                self.cfg.theta1,
                self.cfg.theta3,
                p,
                p_star,
                s,
                tau_delta,
                rn,
                theta2_k,
                t_k,
                gn,
            );
            let accepted = (lambda + fpow(lambda, p_star)) * fpow(delta_gamma_norm, p_star)
                <= theta7 * upsilon * fpow(rn, s);
            if accepted {
                return Ok((lambda, i_prev + j));
            }
        }
        let candidate = lambda_noise_scaled(
            k,
            self.cfg.sigma_nesterov,
            delta,
            p,
            p_star,
            kappa,
            delta_gamma_norm,
        );
        let lambda = clamp_lambda_ball(candidate, delta_gamma_norm, p_star, c0, eps, p);
        Ok((lambda, i_prev + self.cfg.j_max as u64))
    }

    /// Run the iteration on data `v_delta` with noise level `delta`,
    /// stopping by the discrepancy principle (exact residual zero when
    /// `delta = 0`) or at the iteration cap.
    pub fn run(&self, v_delta: &PrimalVec, delta: f64) -> Result<IterationTrace, SolverError> {
        self.cfg.validate()?;
        if delta < 0.0 || !delta.is_finite() {
            return Err(SolverError::NegativeNoise(delta));
        }
        if v_delta.len() != self.fp.space_v().dim() {
            return Err(SolverError::DataDimension {
                got: v_delta.len(),
                expected: self.fp.space_v().dim(),
            });
        }
        if !(self.fp.stability() > 0.0) || !(self.fp.deriv_bound() > 0.0) {
            return Err(SolverError::InvalidConfig(
                "forward problem is not calibrated (stability or derivative bound unset)".into(),
            ));
        }
        let breakdown = self.theta5();
        if !(breakdown.value > 0.0) {
            return Err(SolverError::NonpositiveMargin(breakdown));
        }
        let theta5v = breakdown.value;
        let kappa = kappa_h(self.cfg, self.pen, self.fp);
        let th7 = theta7(self.cfg, self.pen, self.fp);

        let pen = self.pen;
        let cfg = self.cfg;
        let space_u = self.fp.space_u();
        let space_v = self.fp.space_v();
        let p = pen.p();
        let p_star = pen.p_star();
        let c0 = pen.c0();
        let s = cfg.s;
        let eps = self.fp.eps();
        let noise_free = delta == 0.0;
        let tau_delta = cfg.tau * delta;
        let truth = self.fp.u_dagger();

        let xi0 = self.fp.gamma0().clone();
        let mut gamma_prev = xi0.clone();
        let mut gamma_cur = xi0.clone();
        let mut u_cur = pen.conjugate_grad(&gamma_cur);
        let mut prev_breg: Option<f64> = None;
        let mut i_dbts_prev: u64 = 0;
        let mut cum_weighted_residual = 0.0;
        let mut cum_alpha_drift = 0.0;
        let mut cum_lambda_drift = 0.0;
        let mut steps: Vec<TraceStep> = Vec::new();

        for k in 0..=cfg.k_max {
            let delta_gamma_norm = space_u.dual_norm(&gamma_cur.sub(&gamma_prev));
            let (mut lambda, i_dbts) = match cfg.lambda_strategy {
                LambdaStrategy::Zero => (0.0, i_dbts_prev),
                LambdaStrategy::Nesterov => {
                    let candidate = lambda_noise_scaled(
                        k,
                        cfg.sigma_nesterov,
                        delta,
                        p,
                        p_star,
                        kappa,
                        delta_gamma_norm,
                    );
                    (
                        clamp_lambda_ball(candidate, delta_gamma_norm, p_star, c0, eps, p),
                        i_dbts_prev,
                    )
                }
                LambdaStrategy::Dbts => self.dbts_select(
                    k,
                    &gamma_cur,
                    &gamma_prev,
                    delta_gamma_norm,
                    &xi0,
                    v_delta,
                    delta,
                    tau_delta,
                    i_dbts_prev,
                    th7,
                    kappa,
                )?,
            };
            let (mut xi, mut w) = self.extrapolate(&gamma_cur, &gamma_prev, lambda);
            let mut residual = self.residual(&w, v_delta);
            let mut rn = space_v.norm(&residual);
            if !rn.is_finite() {
                return Err(SolverError::NumericBlowup { k });
            }
            // An admissible lambda must vanish whenever the step size does,
            // so a trial point that already meets the discrepancy check
            // forces lambda back to zero and the step is re-formed.
            if rn <= tau_delta && lambda != 0.0 {
                lambda = 0.0;
                xi = gamma_cur.clone();
                w = u_cur.clone();
                residual = self.residual(&w, v_delta);
                rn = space_v.norm(&residual);
            }
            let t_k = space_u.dual_norm(&xi.sub(&xi0));
            let bregman_to_truth = truth
                .map(|t| pen.bregman_value(t, &u_cur, &gamma_cur))
                .unwrap_or(f64::NAN);
            let theta_k = match prev_breg {
                None => 0.0,
                Some(pb) => bregman_to_truth - pb,
            };
            prev_breg = Some(bregman_to_truth);
            let gamma_drift_from_start = space_u.dual_norm(&xi0.sub(&gamma_cur));
            let dist_u_to_center = space_u.norm(&u_cur.sub(self.fp.u0()));
            let dist_w_to_center = space_u.norm(&w.sub(self.fp.u0()));

            if rn <= tau_delta {
                steps.push(TraceStep {
                    k,
                    residual_norm: rn,
                    upsilon: 0.0,
                    lambda,
                    alpha: 0.0,
                    t_k,
                    bregman_to_truth,
                    theta_k,
                    theta2_k: 0.0,
                    i_dbts,
                    delta_gamma_norm,
                    gamma_drift_from_start,
                    dist_u_to_center,
                    dist_w_to_center,
                    admissible_descent: true,
                    admissible_ball: true,
                    cum_weighted_residual,
                    cum_alpha_drift,
                    cum_lambda_drift,
                });
                return Ok(IterationTrace {
                    steps,
                    stop_index: k,
                    stop_reason: StopReason::Discrepancy,
                    delta,
                    tau_delta,
                    theta5: theta5v,
                    final_u: u_cur,
                    final_gamma: gamma_cur,
                    final_residual_norm: rn,
                });
            }

            let theta2_k = select_theta2k(cfg.theta2_bar, p_star, s, rn, t_k);
            let jres = space_v.duality_map(s, &residual);
            let grad = self.fp.deriv_adjoint(&w, &jres);
            let gn = space_u.dual_norm(&grad);
            let upsilon = step_size(
                cfg.theta1, cfg.theta3, p, p_star, s, tau_delta, rn, theta2_k, t_k, gn,
            );
            let noise_cap = if noise_free {
                let kf = (k + 1) as f64;
                Some(cfg.alpha_summable_scale / (kf * kf))
            } else {
                None
            };
            let alpha = match cfg.alpha_strategy {
                AlphaStrategy::Zero => 0.0,
                AlphaStrategy::RuleA => {
                    select_alpha(cfg.theta4, p_star, s, upsilon, rn, theta2_k, t_k, noise_cap)
                }
            };
            let (admissible_descent, admissible_ball) = lambda_admissibility(
                lambda,
                delta_gamma_norm,
                p_star,
                c0,
                theta5v,
                upsilon,
                rn,
                s,
                cfg.zeta,
                eps,
                p,
            );
            cum_weighted_residual += upsilon * fpow(rn, s);
            cum_alpha_drift += alpha * gamma_drift_from_start;
            cum_lambda_drift += lambda * delta_gamma_norm;
            steps.push(TraceStep {
                k,
                residual_norm: rn,
                upsilon,
                lambda,
                alpha,
                t_k,
                bregman_to_truth,
                theta_k,
                theta2_k,
                i_dbts,
                delta_gamma_norm,
                gamma_drift_from_start,
                dist_u_to_center,
                dist_w_to_center,
                admissible_descent,
                admissible_ball,
                cum_weighted_residual,
                cum_alpha_drift,
                cum_lambda_drift,
            });
            if k == cfg.k_max {
                return Ok(IterationTrace {
                    steps,
                    stop_index: k,
                    stop_reason: StopReason::KMax,
                    delta,
                    tau_delta,
                    theta5: theta5v,
                    final_u: u_cur,
                    final_gamma: gamma_cur,
                    final_residual_norm: rn,
                });
            }

            let gamma_next = if alpha == 0.0 {
                DualVec::from_raw(
                    xi.coords()
                        .iter()
                        .zip(grad.coords())
                        .map(|(x, g)| x - upsilon * g)
                        .collect(),
                )
            } else {
                DualVec::from_raw(
                    xi.coords()
                        .iter()
                        .zip(grad.coords())
                        .zip(xi0.coords())
                        .map(|((x, g), x0)| (1.0 - alpha) * x - upsilon * g + alpha * x0)
                        .collect(),
                )
            };
            if !gamma_next.is_finite() {
                return Err(SolverError::NumericBlowup { k });
            }
            gamma_prev = gamma_cur;
            gamma_cur = gamma_next;
            u_cur = pen.conjugate_grad(&gamma_cur);
            i_dbts_prev = i_dbts;
        }
        unreachable!("loop returns at the iteration cap")
    }
}
