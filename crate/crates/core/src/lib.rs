//! Regularization of ill-posed operator equations `F(u) = v` by a
//! two-point gradient method in finite-dimensional models of Banach
//! spaces.
//!
//! The iteration extrapolates between the last two dual iterates, maps back
//! to the primal space through the gradient of the Fenchel conjugate of a
//! p-convex penalty, and takes an iteratively regularized Landweber step.
//! General `l^r` norms, non-smooth penalties such as `l^2 + beta l^1`, three
//! extrapolation-weight strategies (zero, noise-scaled Nesterov cap,
//! discrete backtracking search), and the discrepancy principle are
//! supported, together with runtime monitors for the invariants the
//! convergence theory predicts.
//!
//! Modules:
//!
//! * [`geometry`] — `l^r` spaces, dual norms, duality mappings.
//! * [`penalty`] — p-convex penalties, conjugate gradients, Bregman distances.
//! * [`operators`] — forward-problem contract and synthetic benchmark instances.
//! * [`solver`] — the two-point gradient iteration and its parameter rules.
//! * [`diagnostics`] — theory-invariant audits and noise-sweep reports.
//! * [`cli`] — config-driven experiment runner with CSV/JSON emission.

// Negated comparisons like `!(x > 0.0)` are used on purpose: they treat
// NaN as a validation failure, which `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod geometry;
pub mod operators;
pub mod penalty;
pub mod solver;

pub use geometry::{pairing, DualVec, PrimalVec, SpaceModel};
pub use penalty::{Penalty, PenaltyKind};
pub use solver::{AlphaStrategy, IterationTrace, LambdaStrategy, Solver, SolverConfig, StopReason};
