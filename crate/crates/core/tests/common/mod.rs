//! Shared oracles and fixtures for the integration suites. Everything here
//! is independent of the solver's internal computation paths: the
//! minimizer oracle treats the penalty as a black-box objective, the
//! eigenvalue routine is a plain cyclic Jacobi iteration, and the
//! reference loop codes the plain Landweber recursion directly.
#![allow(dead_code)] // each integration target uses its own subset

use tpgrad::geometry::{pairing, DualVec, PrimalVec, SpaceModel};
use tpgrad::operators::{make_deconv, make_diagexp, DenseMatrix, ForwardProblem};
use tpgrad::penalty::Penalty;
use tpgrad::solver::{select_theta2k, step_size, SolverConfig};

/// Brute-force minimizer of `w -> phi(w) - <xi, w>` by cyclic coordinate
/// search on a geometrically refined grid. Convexity keeps the true
/// minimizer inside the shrunken interval around each grid argmin.
pub fn coordinate_search_minimizer(pen: &Penalty, xi: &DualVec, tol: f64) -> PrimalVec {
    let dim = xi.len();
    let objective =
        |w: Vec<f64>| -> f64 { pen.phi(&PrimalVec::from_coords(w.clone())) - raw_pairing(xi, &w) };
    let r0 = 1.0 + xi.coords().iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let grid: i64 = 16;
    let mut center = vec![0.0; dim];
    let mut radius = r0;
    while radius > tol {
        for i in 0..dim {
            let mut best_value = f64::INFINITY;
            let mut best_x = center[i];
            for g in -grid..=grid {
                let x = center[i] + radius * (g as f64) / (grid as f64);
                let mut w = center.clone();
                w[i] = x;
                let value = objective(w);
                if value < best_value {
                    best_value = value;
                    best_x = x;
                }
            }
            center[i] = best_x;
        }
        radius *= 2.0 / grid as f64;
    }
    PrimalVec::from_coords(center)
}

fn raw_pairing(xi: &DualVec, w: &[f64]) -> f64 {
    xi.coords().iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigenvalues(m: &DenseMatrix) -> Vec<f64> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "matrix must be square");
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| m.get(i, j)).collect())
        .collect();
    let scale: f64 = (0..n).map(|i| a[i][i].abs()).fold(1e-300f64, f64::max);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Directly coded Landweber recursion with a convex penalty:
/// `Xi_{k+1} = Xi_k - upsilon_k L(u_k)* J_s(F(u_k) - v_delta)`,
/// `u_{k+1} = grad phi*(Xi_{k+1})`, using the same step-size rule as the
/// solver. Returns the residual norms at `k = 0..=steps` plus the final
/// primal and dual iterates.
pub fn reference_landweber(
    pen: &Penalty,
    fp: &ForwardProblem,
    cfg: &SolverConfig,
    v_delta: &PrimalVec,
    delta: f64,
    steps: usize,
) -> (Vec<f64>, PrimalVec, DualVec) {
    let space_u = fp.space_u();
    let space_v = fp.space_v();
    let tau_delta = cfg.tau * delta;
    let xi0 = fp.gamma0().clone();
    let mut xi = xi0.clone();
    let mut u = pen.conjugate_grad(&xi);
    let mut residual_norms = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let r = fp.apply(&u).sub(v_delta);
        let rn = space_v.norm(&r);
        residual_norms.push(rn);
        if k == steps {
            break;
        }
        let t_k = space_u.dual_norm(&xi.sub(&xi0));
        let theta2_k = select_theta2k(cfg.theta2_bar, pen.p_star(), cfg.s, rn, t_k);
        let jres = space_v.duality_map(cfg.s, &r);
        let g = fp.deriv_adjoint(&u, &jres);
        let gn = space_u.dual_norm(&g);
        let upsilon = step_size(
            cfg.theta1,
            cfg.theta3,
            pen.p(),
            pen.p_star(),
            cfg.s,
            tau_delta,
            rn,
            theta2_k,
            t_k,
            gn,
        );
        xi = DualVec::from_coords(
            xi.coords()
                .iter()
                .zip(g.coords())
                .map(|(x, gc)| x - upsilon * gc)
                .collect(),
        );
        u = pen.conjugate_grad(&xi);
    }
    (residual_norms, u, xi)
}

pub const DECONV_N: usize = 64;
pub const DECONV_WIDTH: f64 = 0.05;
pub const DIAGEXP_N: usize = 32;
pub const DIAGEXP_SIGMA_SCALE: f64 = 10.0;
pub const CALIBRATION_SAMPLES: usize = 400;

/// Deconvolution fixture: sparsity-friendly penalty, raised step ceiling
/// (the smoothing operator needs large late steps), and a small `theta4`
/// because the sampled stability constant of the deconvolution is large.
pub fn deconv_fixture() -> (SolverConfig, Penalty, ForwardProblem) {
    let space = SpaceModel::new(DECONV_N, 2.0).unwrap();
    let pen = Penalty::quadratic_l1(space, 1e-3).unwrap();
    let mut fp = make_deconv(DECONV_N, DECONV_WIDTH, &pen).unwrap();
    fp.calibrate(&pen, CALIBRATION_SAMPLES, 42).unwrap();
    let cfg = SolverConfig {
        theta3: 1e6,
        theta4: 0.002,
        h_scale: 50.0,
        ..SolverConfig::default()
    };
    (cfg, pen, fp)
}

/// Diagonal-exponential fixture with the default constants.
pub fn diagexp_fixture() -> (SolverConfig, Penalty, ForwardProblem) {
    let space = SpaceModel::new(DIAGEXP_N, 2.0).unwrap();
    let pen = Penalty::power_norm(space, 2.0).unwrap();
    let mut fp = make_diagexp(DIAGEXP_N, DIAGEXP_SIGMA_SCALE, &pen).unwrap();
    fp.calibrate(&pen, CALIBRATION_SAMPLES, 43).unwrap();
    (SolverConfig::default(), pen, fp)
}

/// Exact data of the problem's attached solution.
pub fn exact_data(fp: &ForwardProblem) -> PrimalVec {
    fp.apply(fp.u_dagger().expect("fixture carries an exact solution"))
}

#[allow(dead_code)]
pub fn sanity_check_pairing(xi: &DualVec, w: &PrimalVec) -> f64 {
    pairing(xi, w)
}
