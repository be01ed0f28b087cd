//! Forward-problem contract: the operator `F`, its derivative family
//! `L(u)`, the adjoint action on dual vectors, and the constants of the
//! standard nonlinearity assumptions (tangential cone constant `eta`,
//! derivative bound, Lipschitz stability constant).
//!
//! Two synthetic instances are provided. `LinearDeconv` discretizes a
//! Gaussian-kernel Fredholm convolution on a uniform grid, the classic
//! ill-conditioned benchmark; it is exactly linear, so `eta = 0`.
//! `DiagonalExp` applies `u_i -> sigma_i (exp(u_i) - 1)` coordinate-wise;
//! it is nonlinear but satisfies the cone condition with small `eta` on a
//! sufficiently small ball.
//!
//! The assumption constants are certified by seeded sampling over the
//! relevant ball with a 1.1 safety factor, not proven; linear instances and
//! diagonal derivatives get exact values where they exist.

use crate::geometry::{DualVec, PrimalVec, SpaceModel};
use crate::penalty::Penalty;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicBool, Ordering};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OperatorError {
    #[error("estimator needs at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("all sampled pairs were degenerate; cannot estimate the constant")]
    DegenerateSamples,
    #[error("problem size invalid: {0}")]
    InvalidSize(String),
    #[error("operation requires a known exact solution")]
    MissingTruth,
}

/// Dense row-major matrix with the actions needed here.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::from_rows(n, n, vec![0.0; n * n]);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        let mut m = Self::identity(n);
        for v in &mut m.data {
            *v *= c;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for (i, row) in self.data.chunks_exact(self.cols).enumerate() {
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            out[i] = acc;
        }
        out
    }

    pub fn matvec_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, row) in self.data.chunks_exact(self.cols).enumerate() {
            let yi = y[i];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
        out
    }

    /// Largest singular value via power iteration on `A^T A`.
    pub fn spectral_norm(&self, iterations: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        let mut v: Vec<f64> = (0..self.cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut sigma = 0.0;
        for _ in 0..iterations {
            let w = self.matvec_transpose(&self.matvec(&v));
            let nrm = w.iter().map(|c| c * c).sum::<f64>().sqrt();
            if nrm == 0.0 {
                return 0.0;
            }
            sigma = nrm.sqrt();
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / nrm;
            }
        }
        sigma
    }
}

/// The operator side of a forward problem: `F`, the derivative family
/// `L(u)`, and its adjoint action.
pub trait ForwardMap: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;

    /// `F(u)`.
    fn apply(&self, u: &PrimalVec) -> PrimalVec;

    /// `L(u) h`.
    fn deriv_apply(&self, u: &PrimalVec, h: &PrimalVec) -> PrimalVec;

    /// `L(u)* xi`, the adjoint action on data-space functionals.
    fn deriv_adjoint(&self, u: &PrimalVec, xi: &DualVec) -> DualVec;

    fn is_linear(&self) -> bool {
        false
    }

    /// An exact bound for `sup ||L(u)||` over the ball of the given radius
    /// around `center`, when the instance can provide one.
    fn deriv_bound_exact(&self, _center: &PrimalVec, _radius: f64) -> Option<f64> {
        None
    }
}

/// Discretized Fredholm convolution with a Gaussian kernel,
/// `A_ij = (1/n) exp(-((i-j)/n)^2 / (2 w^2))`.
#[derive(Clone, Debug)]
pub struct LinearDeconv {
    matrix: DenseMatrix,
}

impl LinearDeconv {
    pub fn new(matrix: DenseMatrix) -> Self {
        Self { matrix }
    }

    pub fn gaussian(n: usize, kernel_width: f64) -> Result<Self, OperatorError> {
        if n < 8 {
            return Err(OperatorError::InvalidSize(format!(
                "deconvolution grid needs n >= 8, got {n}"
            )));
        }
        if !(kernel_width > 0.0) || !kernel_width.is_finite() {
            return Err(OperatorError::InvalidSize(format!(
                "kernel width must be positive, got {kernel_width}"
            )));
        }
        let nf = n as f64;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let d = (i as f64 - j as f64) / nf;
                data.push((-d * d / (2.0 * kernel_width * kernel_width)).exp() / nf);
            }
        }
        Ok(Self {
            matrix: DenseMatrix::from_rows(n, n, data),
        })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }
}

impl ForwardMap for LinearDeconv {
    fn dim_in(&self) -> usize {
        self.matrix.cols()
    }

    fn dim_out(&self) -> usize {
        self.matrix.rows()
    }

    fn apply(&self, u: &PrimalVec) -> PrimalVec {
        PrimalVec::from_raw(self.matrix.matvec(u.coords()))
    }

    fn deriv_apply(&self, _u: &PrimalVec, h: &PrimalVec) -> PrimalVec {
        PrimalVec::from_raw(self.matrix.matvec(h.coords()))
    }

    fn deriv_adjoint(&self, _u: &PrimalVec, xi: &DualVec) -> DualVec {
        DualVec::from_raw(self.matrix.matvec_transpose(xi.coords()))
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// Coordinate-wise exponential map `F(u)_i = sigma_i (exp(u_i) - 1)` with
/// derivative `L(u) = diag(sigma_i exp(u_i))`.
#[derive(Clone, Debug)]
pub struct DiagonalExp {
    scales: Vec<f64>,
}

impl DiagonalExp {
    pub fn new(scales: Vec<f64>) -> Result<Self, OperatorError> {
        if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(OperatorError::InvalidSize(
                "diagonal scales must be positive".into(),
            ));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
}

impl ForwardMap for DiagonalExp {
    fn dim_in(&self) -> usize {
        self.scales.len()
    }

    fn dim_out(&self) -> usize {
        self.scales.len()
    }

    fn apply(&self, u: &PrimalVec) -> PrimalVec {
        PrimalVec::from_raw(
            self.scales
                .iter()
                .zip(u.coords())
                .map(|(s, c)| s * (c.exp() - 1.0))
                .collect(),
        )
    }

    fn deriv_apply(&self, u: &PrimalVec, h: &PrimalVec) -> PrimalVec {
        PrimalVec::from_raw(
            self.scales
                .iter()
                .zip(u.coords())
                .zip(h.coords())
                .map(|((s, c), hc)| s * c.exp() * hc)
                .collect(),
        )
    }

    fn deriv_adjoint(&self, u: &PrimalVec, xi: &DualVec) -> DualVec {
        DualVec::from_raw(
            self.scales
                .iter()
                .zip(u.coords())
                .zip(xi.coords())
                .map(|((s, c), x)| s * c.exp() * x)
                .collect(),
        )
    }

    fn deriv_bound_exact(&self, center: &PrimalVec, radius: f64) -> Option<f64> {
        // ||u - center||_r <= radius bounds every coordinate deviation, so
        // sup sigma_i exp(u_i) <= max_i sigma_i exp(center_i + radius).
        let sup = self
            .scales
            .iter()
            .zip(center.coords())
            .map(|(s, c)| s * (c + radius).exp())
            .fold(0.0f64, f64::max);
        Some(sup)
    }
}

/// A forward problem bundled with its domain data and certified assumption
/// constants.
pub struct ForwardProblem {
    map: Box<dyn ForwardMap>,
    space_u: SpaceModel,
    space_v: SpaceModel,
    u0: PrimalVec,
    gamma0: DualVec,
    eps: f64,
    eta: f64,
    stability: f64,
    deriv_bound: f64,
    u_dagger: Option<PrimalVec>,
    warned_outside_ball: AtomicBool,
}

impl ForwardProblem {
    /// Assemble a problem around `u0` with `gamma0 = subgradient(u0)`.
    ///
    /// When `eps` is `None` the ball radius is derived from the closeness
    /// condition `D_gamma0 phi(u_dagger, u0) <= c0 eps^p`, leaving a 10%
    /// margin; the exact solution must be known in that case.
    pub fn new(
        map: Box<dyn ForwardMap>,
        space_u: SpaceModel,
        space_v: SpaceModel,
        pen: &Penalty,
        u0: PrimalVec,
        u_dagger: Option<PrimalVec>,
        eps: Option<f64>,
    ) -> Result<Self, OperatorError> {
        assert_eq!(
            map.dim_in(),
            space_u.dim(),
            "input space dimension mismatch"
        );
        assert_eq!(
            map.dim_out(),
            space_v.dim(),
            "data space dimension mismatch"
        );
        assert_eq!(u0.len(), space_u.dim(), "u0 dimension mismatch");
        let gamma0 = pen.subgradient(&u0);
        let eps = match eps {
            Some(e) => {
                if !(e > 0.0) || !e.is_finite() {
                    return Err(OperatorError::InvalidSize(format!(
                        "ball radius must be positive, got {e}"
                    )));
                }
                e
            }
            None => {
                let truth = u_dagger.as_ref().ok_or(OperatorError::MissingTruth)?;
                let d0 = pen.bregman_value(truth, &u0, &gamma0);
                (d0 / (0.9 * pen.c0())).powf(1.0 / pen.p())
            }
        };
        Ok(Self {
            map,
            space_u,
            space_v,
            u0,
            gamma0,
            eps,
            eta: 0.0,
            stability: 0.0,
            deriv_bound: 0.0,
            u_dagger,
            warned_outside_ball: AtomicBool::new(false),
        })
    }

    pub fn space_u(&self) -> SpaceModel {
        self.space_u
    }

    pub fn space_v(&self) -> SpaceModel {
        self.space_v
    }

    pub fn u0(&self) -> &PrimalVec {
        &self.u0
    }

    pub fn gamma0(&self) -> &DualVec {
        &self.gamma0
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Tangential cone constant.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Lipschitz stability constant of the inversion.
    pub fn stability(&self) -> f64 {
        self.stability
    }

    /// Uniform bound on `||L(u)||` over `B(u0, 3 eps)`.
    pub fn deriv_bound(&self) -> f64 {
        self.deriv_bound
    }

    pub fn u_dagger(&self) -> Option<&PrimalVec> {
        self.u_dagger.as_ref()
    }

    pub fn map(&self) -> &dyn ForwardMap {
        self.map.as_ref()
    }

    pub fn is_linear(&self) -> bool {
        self.map.is_linear()
    }

    /// Force the tangential cone constant (diagnostic/testing knob).
    pub fn set_eta(&mut self, eta: f64) {
        self.eta = eta;
    }

    /// Force the stability constant (diagnostic/testing knob).
    pub fn set_stability(&mut self, c: f64) {
        self.stability = c;
    }

    /// `F(u)`, with a one-shot warning when evaluated outside `B(u0, 3 eps)`.
    pub fn apply(&self, u: &PrimalVec) -> PrimalVec {
        if self.space_u.norm(&u.sub(&self.u0)) > 3.0 * self.eps
            && !self.warned_outside_ball.swap(true, Ordering::Relaxed)
        {
            eprintln!(
                "warning: forward operator evaluated outside B(u0, 3*eps), eps = {}",
                self.eps
            );
        }
        self.map.apply(u)
    }

    /// `L(u) h`.
    pub fn deriv_apply(&self, u: &PrimalVec, h: &PrimalVec) -> PrimalVec {
        self.map.deriv_apply(u, h)
    }

    /// `L(u)* xi`.
    pub fn deriv_adjoint(&self, u: &PrimalVec, xi: &DualVec) -> DualVec {
        self.map.deriv_adjoint(u, xi)
    }

    fn sample_in_ball(&self, radius: f64, rng: &mut ChaCha8Rng) -> PrimalVec {
        let dim = self.space_u.dim();
        let dir = PrimalVec::from_raw((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let nrm = self.space_u.norm(&dir);
        if nrm == 0.0 {
            return self.u0.clone();
        }
        let t: f64 = rng.gen_range(0.0..1.0);
        let scale = radius * t / nrm;
        PrimalVec::from_raw(
            self.u0
                .coords()
                .iter()
                .zip(dir.coords())
                .map(|(c, d)| c + scale * d)
                .collect(),
        )
    }

    /// Estimate the tangential cone constant over `B(u0, 3 eps)` by pair
    /// sampling, store it with a 1.1 safety factor, and return the stored
    /// value. Linear maps satisfy the cone condition with `eta = 0` exactly
    /// and skip the sampling.
    pub fn estimate_eta(
        &mut self,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, OperatorError> {
        if samples < 100 {
            return Err(OperatorError::InsufficientSamples {
                needed: 100,
                got: samples,
            });
        }
        if self.map.is_linear() {
            self.eta = 0.0;
            return Ok(0.0);
        }
        let radius = 3.0 * self.eps;
        let mut worst: Option<f64> = None;
        for _ in 0..samples {
            let u = self.sample_in_ball(radius, rng);
            let ut = self.sample_in_ball(radius, rng);
            let fu = self.map.apply(&u);
            let fut = self.map.apply(&ut);
            let diff = fut.sub(&fu);
            let den = self.space_v.norm(&diff);
            if den == 0.0 {
                continue;
            }
            let lin = self.map.deriv_apply(&u, &ut.sub(&u));
            let num = self.space_v.norm(&diff.sub(&lin));
            let ratio = num / den;
            worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
        }
        let worst = worst.ok_or(OperatorError::DegenerateSamples)?;
        self.eta = 1.1 * worst;
        Ok(self.eta)
    }

    /// Estimate the stability constant `C` of
    /// `D_gamma phi(u~, u) <= C ||F(u~) - F(u)||^p` over `B(u0, 3 eps)`,
    /// store it with a 1.1 safety factor, and return the stored value.
    pub fn estimate_stability(
        &mut self,
        pen: &Penalty,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, OperatorError> {
        if samples < 100 {
            return Err(OperatorError::InsufficientSamples {
                needed: 100,
                got: samples,
            });
        }
        let radius = 3.0 * self.eps;
        let p = pen.p();
        let mut worst: Option<f64> = None;
        for _ in 0..samples {
            let u = self.sample_in_ball(radius, rng);
            let ut = self.sample_in_ball(radius, rng);
            let den = self
                .space_v
                .norm(&self.map.apply(&ut).sub(&self.map.apply(&u)));
            if den == 0.0 {
                continue;
            }
            let gamma = pen.subgradient(&u);
            let d = pen.bregman_value(&ut, &u, &gamma);
            let ratio = d / den.powf(p);
            worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
        }
        let worst = worst.ok_or(OperatorError::DegenerateSamples)?;
        self.stability = 1.1 * worst;
        Ok(self.stability)
    }

    /// Estimate the uniform derivative bound over `B(u0, 3 eps)` and store
    /// it. Uses an exact instance bound when available, power iteration for
    /// linear maps between `l^2` spaces, and ratio sampling otherwise.
    pub fn estimate_deriv_bound(
        &mut self,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, OperatorError> {
        let radius = 3.0 * self.eps;
        if let Some(exact) = self.map.deriv_bound_exact(&self.u0, radius) {
            self.deriv_bound = exact;
            return Ok(exact);
        }
        if self.map.is_linear() && self.space_u.exponent() == 2.0 && self.space_v.exponent() == 2.0
        {
            // derivative is independent of the base point for linear maps
            let probe = |v: &[f64]| {
                self.map
                    .deriv_apply(&self.u0, &PrimalVec::from_raw(v.to_vec()))
                    .into_coords()
            };
            let adj = |y: &[f64]| {
                self.map
                    .deriv_adjoint(&self.u0, &DualVec::from_raw(y.to_vec()))
                    .into_coords()
            };
            let mut v: Vec<f64> = (0..self.space_u.dim())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let mut sigma = 0.0;
            for _ in 0..300 {
                let w = adj(&probe(&v));
                let nrm = w.iter().map(|c| c * c).sum::<f64>().sqrt();
                if nrm == 0.0 {
                    break;
                }
                sigma = nrm.sqrt();
                for (vi, wi) in v.iter_mut().zip(&w) {
                    *vi = wi / nrm;
                }
            }
            self.deriv_bound = 1.05 * sigma;
            return Ok(self.deriv_bound);
        }
        if samples < 100 {
            return Err(OperatorError::InsufficientSamples {
                needed: 100,
                got: samples,
            });
        }
        let mut worst: Option<f64> = None;
        for _ in 0..samples {
            let u = self.sample_in_ball(radius, rng);
            let dim = self.space_u.dim();
            let h = PrimalVec::from_raw((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let hn = self.space_u.norm(&h);
            if hn == 0.0 {
                continue;
            }
            let ratio = self.space_v.norm(&self.map.deriv_apply(&u, &h)) / hn;
            worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
        }
        let worst = worst.ok_or(OperatorError::DegenerateSamples)?;
        self.deriv_bound = 1.1 * worst;
        Ok(self.deriv_bound)
    }

    /// Run all three estimators with a deterministic generator.
    pub fn calibrate(
        &mut self,
        pen: &Penalty,
        samples: usize,
        seed: u64,
    ) -> Result<(), OperatorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.estimate_eta(samples, &mut rng)?;
        self.estimate_stability(pen, samples, &mut rng)?;
        self.estimate_deriv_bound(samples, &mut rng)?;
        Ok(())
    }
}

/// Piecewise-constant profile on `n` grid points: a positive plateau on
/// `[0.25, 0.45)`, a negative one on `[0.6, 0.8)`, zero elsewhere.
pub fn piecewise_profile(n: usize, amplitude: f64) -> PrimalVec {
    let coords = (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5) / n as f64;
            if (0.25..0.45).contains(&x) {
                amplitude
            } else if (0.6..0.8).contains(&x) {
                -0.6 * amplitude
            } else {
                0.0
            }
        })
        .collect();
    PrimalVec::from_raw(coords)
}

/// Amplitude of the bundled deconvolution truth profile. The scale keeps the
/// data norm near one so absolute noise levels between 1e-1 and 1e-3 span
/// relative noise from roughly 10% down to 0.1%.
pub const DECONV_AMPLITUDE: f64 = 2.0;

/// Gaussian-kernel deconvolution benchmark on `n >= 8` points with a
/// piecewise-constant exact solution, `u0 = 0`, and the ball radius derived
/// from the closeness condition.
pub fn make_deconv(
    n: usize,
    kernel_width: f64,
    pen: &Penalty,
) -> Result<ForwardProblem, OperatorError> {
    let map = LinearDeconv::gaussian(n, kernel_width)?;
    let space_u = pen.space();
    assert_eq!(space_u.dim(), n, "penalty space dimension mismatch");
    let space_v = SpaceModel::new(n, 2.0).expect("valid space");
    let truth = piecewise_profile(n, DECONV_AMPLITUDE);
    ForwardProblem::new(
        Box::new(map),
        space_u,
        space_v,
        pen,
        PrimalVec::zeros(n),
        Some(truth),
        None,
    )
}

/// Amplitude of the bundled diagonal-exponential truth profile, small enough
/// that the tangential cone constant stays well below one on the derived ball.
pub const DIAGEXP_AMPLITUDE: f64 = 0.02;

/// Diagonal exponential benchmark: `sigma_i = sigma_scale * (0.7 + 0.6 i/(n-1))`
/// and a sine-profile exact solution around `u0 = 0`.
pub fn make_diagexp(
    n: usize,
    sigma_scale: f64,
    pen: &Penalty,
) -> Result<ForwardProblem, OperatorError> {
    if n < 2 {
        return Err(OperatorError::InvalidSize(format!(
            "diagonal problem needs n >= 2, got {n}"
        )));
    }
    if !(sigma_scale > 0.0) || !sigma_scale.is_finite() {
        return Err(OperatorError::InvalidSize(format!(
            "sigma scale must be positive, got {sigma_scale}"
        )));
    }
    let scales = (0..n)
        .map(|i| sigma_scale * (0.7 + 0.6 * i as f64 / (n - 1) as f64))
        .collect();
    let map = DiagonalExp::new(scales)?;
    let space_u = pen.space();
    assert_eq!(space_u.dim(), n, "penalty space dimension mismatch");
    let space_v = SpaceModel::new(n, 2.0).expect("valid space");
    let truth = PrimalVec::from_raw(
        (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64;
                DIAGEXP_AMPLITUDE * (2.0 * std::f64::consts::PI * x).sin()
            })
            .collect(),
    );
    ForwardProblem::new(
        Box::new(map),
        space_u,
        space_v,
        pen,
        PrimalVec::zeros(n),
        Some(truth),
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pairing;

    fn euclid(n: usize) -> SpaceModel {
        SpaceModel::new(n, 2.0).unwrap()
    }

    fn power2(n: usize) -> Penalty {
        Penalty::power_norm(euclid(n), 2.0).unwrap()
    }

    fn identity_problem(n: usize, c: f64, pen: &Penalty) -> ForwardProblem {
        let map = LinearDeconv::new(DenseMatrix::scaled_identity(n, c));
        ForwardProblem::new(
            Box::new(map),
            euclid(n),
            euclid(n),
            pen,
            PrimalVec::zeros(n),
            None,
            Some(1.0),
        )
        .unwrap()
    }

    #[test]
    fn apply_zero_maps_to_zero() {
        let pen = power2(8);
        let fp = make_deconv(8, 0.1, &pen).unwrap();
        let out = fp.apply(&PrimalVec::zeros(8));
        assert!(out.coords().iter().all(|&c| c == 0.0));

        let pen = power2(8);
        let fp = make_diagexp(8, 1.0, &pen).unwrap();
        let out = fp.apply(&PrimalVec::zeros(8));
        assert!(out.coords().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn identity_operator_passes_vectors_through() {
        let pen = power2(2);
        let map = LinearDeconv::new(DenseMatrix::identity(2));
        let fp = ForwardProblem::new(
            Box::new(map),
            euclid(2),
            euclid(2),
            &pen,
            PrimalVec::zeros(2),
            None,
            Some(10.0),
        )
        .unwrap();
        let u = PrimalVec::from_coords(vec![1.0, 2.0]);
        assert_eq!(fp.apply(&u).coords(), &[1.0, 2.0]);
        let xi = DualVec::from_coords(vec![0.5, -0.5]);
        assert_eq!(fp.deriv_adjoint(&u, &xi).coords(), &[0.5, -0.5]);
    }

    #[test]
    fn diagexp_adjoint_at_zero_scales_by_sigma() {
        let pen = power2(3);
        let map = DiagonalExp::new(vec![1.0, 2.0, 3.0]).unwrap();
        let fp = ForwardProblem::new(
            Box::new(map),
            euclid(3),
            euclid(3),
            &pen,
            PrimalVec::zeros(3),
            None,
            Some(1.0),
        )
        .unwrap();
        let xi = DualVec::from_coords(vec![1.0, 1.0, 1.0]);
        assert_eq!(
            fp.deriv_adjoint(&PrimalVec::zeros(3), &xi).coords(),
            &[1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn adjoint_identity_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = DenseMatrix::from_rows(n, n, data);
        let deconv = LinearDeconv::new(a);
        let diag = DiagonalExp::new((0..n).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
        let maps: [&dyn ForwardMap; 2] = [&deconv, &diag];
        for map in maps {
            for _ in 0..1000 {
                let u = PrimalVec::from_raw((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect());
                let h = PrimalVec::from_raw((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let xi = DualVec::from_raw((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let lhs = pairing(&xi, &map.deriv_apply(&u, &h));
                let rhs = pairing(&map.deriv_adjoint(&u, &xi), &h);
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn estimate_eta_is_exactly_zero_for_linear_maps() {
        let pen = power2(16);
        let mut fp = make_deconv(16, 0.1, &pen).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(fp.estimate_eta(200, &mut rng).unwrap(), 0.0);
        assert_eq!(fp.eta(), 0.0);
    }

    #[test]
    fn estimate_eta_shrinks_with_the_ball() {
        let pen = power2(16);
        let map = DiagonalExp::new(vec![1.0; 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut small = ForwardProblem::new(
            Box::new(map),
            euclid(16),
            euclid(16),
            &pen,
            PrimalVec::zeros(16),
            None,
            Some(1e-4),
        )
        .unwrap();
        let eta = small.estimate_eta(500, &mut rng).unwrap();
        assert!(eta < 1e-3, "first-order exactness in the small-ball limit");
    }

    #[test]
    fn estimate_eta_diagexp_sampling_bound() {
        // sigma = 1, eps = 0.1: the cone ratio stays below 0.1 on samples;
        // the elementary bound e^h - 1 - h <= h^2/2 e^{|h|} caps each pair.
        let n = 64;
        let pen = power2(n);
        let map = DiagonalExp::new(vec![1.0; n]).unwrap();
        let mut fp = ForwardProblem::new(
            Box::new(map),
            euclid(n),
            euclid(n),
            &pen,
            PrimalVec::zeros(n),
            None,
            Some(0.1),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eta = fp.estimate_eta(10_000, &mut rng).unwrap();
        assert!(eta > 0.0);
        assert!(eta < 0.1, "eta estimate {eta} out of expected range");
    }

    #[test]
    fn estimate_eta_rejects_small_sample_counts() {
        let pen = power2(8);
        let mut fp = make_diagexp(8, 1.0, &pen).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert!(matches!(
            fp.estimate_eta(10, &mut rng),
            Err(OperatorError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn stability_constant_for_scaled_identity() {
        // D = ||du||^2/2 and ||F(u~) - F(u)|| = c ||du||, so every sampled
        // ratio equals 1/(2 c^2) and the estimate is exactly 1.1 times that.
        let pen = power2(10);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for c in [1.0, 2.0] {
            let mut fp = identity_problem(10, c, &pen);
            let est = fp.estimate_stability(&pen, 300, &mut rng).unwrap();
            let exact = 0.5 / (c * c);
            assert!(est >= exact * 0.999, "estimate below the exact ratio");
            assert!(est <= exact * 1.101, "estimate above the safety factor");
        }
    }

    #[test]
    fn stability_constant_finite_for_diagexp() {
        let pen = power2(12);
        let mut fp = make_diagexp(12, 2.0, &pen).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let est = fp.estimate_stability(&pen, 500, &mut rng).unwrap();
        assert!(est.is_finite());
        assert!(est > 0.0);
    }

    #[test]
    fn deriv_bound_power_iteration_matches_diag_max() {
        let pen = power2(6);
        let map = LinearDeconv::new(DenseMatrix::scaled_identity(6, 3.0));
        let mut fp = ForwardProblem::new(
            Box::new(map),
            euclid(6),
            euclid(6),
            &pen,
            PrimalVec::zeros(6),
            None,
            Some(1.0),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let bound = fp.estimate_deriv_bound(200, &mut rng).unwrap();
        assert!(bound >= 3.0 - 1e-9);
        assert!(bound <= 3.0 * 1.05 + 1e-9);
    }

    #[test]
    fn gaussian_kernel_is_symmetric() {
        let deconv = LinearDeconv::gaussian(16, 0.2).unwrap();
        let a = deconv.matrix();
        for i in 0..16 {
            for j in 0..16 {
                assert!((a.get(i, j) - a.get(j, i)).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn gaussian_kernel_flat_limit_is_row_constant() {
        let deconv = LinearDeconv::gaussian(8, 1e9).unwrap();
        let a = deconv.matrix();
        for i in 0..8 {
            for j in 0..8 {
                assert!((a.get(i, j) - 0.125).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn make_deconv_rejects_tiny_grids() {
        let pen = power2(4);
        assert!(matches!(
            make_deconv(4, 0.1, &pen),
            Err(OperatorError::InvalidSize(_))
        ));
    }

    #[test]
    fn taylor_consistency_for_diagexp() {
        let n = 8;
        let map = DiagonalExp::new(vec![1.5; n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let space = euclid(n);
        for _ in 0..50 {
            let u = PrimalVec::from_raw((0..n).map(|_| rng.gen_range(-0.3..0.3)).collect());
            let h = PrimalVec::from_raw((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let t = 1e-6;
            let shifted = PrimalVec::from_raw(
                u.coords()
                    .iter()
                    .zip(h.coords())
                    .map(|(a, b)| a + t * b)
                    .collect(),
            );
            let lin = map.deriv_apply(&u, &h);
            let diff = map.apply(&shifted).sub(&map.apply(&u));
            let remainder = PrimalVec::from_raw(
                diff.coords()
                    .iter()
                    .zip(lin.coords())
                    .map(|(d, l)| d - t * l)
                    .collect(),
            );
            assert!(space.norm(&remainder) / t <= 1e-4 * space.norm(&h));
        }
    }

    #[test]
    fn assumption_ball_radius_from_closeness_condition() {
        let pen = power2(8);
        let fp = make_diagexp(8, 1.0, &pen).unwrap();
        let truth = fp.u_dagger().unwrap();
        let d0 = pen.bregman_value(truth, fp.u0(), fp.gamma0());
        let bound = pen.c0() * fp.eps().powf(pen.p());
        assert!(d0 <= bound, "closeness condition must hold by construction");
    }
}
