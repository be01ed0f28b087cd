//! p-convex penalty functionals with exact subgradient selections,
//! conjugate gradients, and Bregman distances.
//!
//! Two concrete penalties are provided:
//!
//! * `power_norm`: `phi(u) = (1/p) ||u||_p^p` with `p >= 2` on a space whose
//!   norm exponent matches `p`. Subgradient and conjugate gradient are exact
//!   coordinate-wise power maps.
//! * `quadratic_l1`: `phi(u) = (1/2) ||u||_2^2 + beta ||u||_1` on an `l^2`
//!   space. The conjugate gradient is the soft-threshold map, so the penalty
//!   promotes sparsity while keeping `p = 2` convexity with `c0 = 1/2`.

use crate::geometry::{pairing, DualVec, PrimalVec, SpaceModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PenaltyError {
    #[error("power-norm penalty requires p >= 2, got {0}")]
    InvalidOrder(f64),
    #[error("penalty exponent p = {p} must match the space norm exponent r = {r}")]
    ExponentMismatch { p: f64, r: f64 },
    #[error("quadratic-l1 penalty requires an l^2 space, got r = {0}")]
    NotEuclidean(f64),
    #[error("l1 weight must be nonnegative and finite, got {0}")]
    InvalidWeight(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyKind {
    PowerNorm,
    QuadraticL1,
}

/// A p-convex penalty `phi` together with its convexity data.
///
/// `c0` is the constant of the lower bound
/// `D_gamma phi(u~, u) >= c0 ||u - u~||^p`. For `quadratic_l1` it is exactly
/// `1/2`; for `power_norm` the default `2^{1-p}/p` is validated by sampling
/// at construction and shrunk by factors of `0.9` until no sampled pair
/// violates the bound.
#[derive(Clone, Debug)]
pub struct Penalty {
    kind: PenaltyKind,
    space: SpaceModel,
    p: f64,
    c0: f64,
    beta: f64,
}

const C0_VALIDATION_PAIRS: usize = 10_000;
const C0_VALIDATION_SEED: u64 = 0x7067_7261u64;

impl Penalty {
    /// `phi(u) = (1/p) ||u||_p^p` on a space with norm exponent `r = p`.
    pub fn power_norm(space: SpaceModel, p: f64) -> Result<Self, PenaltyError> {
        if !(p >= 2.0) || !p.is_finite() {
            return Err(PenaltyError::InvalidOrder(p));
        }
        if space.exponent() != p {
            return Err(PenaltyError::ExponentMismatch {
                p,
                r: space.exponent(),
            });
        }
        let mut pen = Self {
            kind: PenaltyKind::PowerNorm,
            space,
            p,
            c0: 2f64.powf(1.0 - p) / p,
            beta: 0.0,
        };
        pen.c0 = pen.validated_c0();
        Ok(pen)
    }

    /// `phi(u) = (1/2) ||u||_2^2 + beta ||u||_1` on an `l^2` space.
    pub fn quadratic_l1(space: SpaceModel, beta: f64) -> Result<Self, PenaltyError> {
        if space.exponent() != 2.0 {
            return Err(PenaltyError::NotEuclidean(space.exponent()));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(PenaltyError::InvalidWeight(beta));
        }
        Ok(Self {
            kind: PenaltyKind::QuadraticL1,
            space,
            p: 2.0,
            c0: 0.5,
            beta,
        })
    }

    fn validated_c0(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(C0_VALIDATION_SEED);
        let dim = self.space.dim();
        // The sampled distances do not depend on c0, so evaluate each pair
        // once and shrink c0 against the frozen sample.
        let samples: Vec<(f64, f64)> = (0..C0_VALIDATION_PAIRS)
            .map(|_| {
                let scale = 10f64.powf(rng.gen_range(-1.0..1.0));
                let u = PrimalVec::from_raw(
                    (0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect(),
                );
                let ut = PrimalVec::from_raw(
                    (0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect(),
                );
                let gamma = self.subgradient(&u);
                let d = self.bregman_value(&ut, &u, &gamma);
                let gap = self.space.norm(&ut.sub(&u)).powf(self.p);
                (d, gap)
            })
            .collect();
        let violated = |c0: f64| {
            samples
                .iter()
                .any(|&(d, gap)| d < c0 * gap - 1e-10 * gap.max(1.0))
        };
        let mut c0 = self.c0;
        while violated(c0) {
            c0 *= 0.9;
        }
        c0
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn space(&self) -> SpaceModel {
        self.space
    }

    /// Convexity order `p`.
    pub fn p(&self) -> f64 {
        self.p
    }

    /// Conjugate exponent `p* = p/(p-1)`.
    pub fn p_star(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// Convexity constant of the p-convexity lower bound.
    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Penalty value `phi(u)`.
    pub fn phi(&self, u: &PrimalVec) -> f64 {
        assert_eq!(u.len(), self.space.dim(), "penalty dimension mismatch");
        match self.kind {
            PenaltyKind::PowerNorm => {
                if self.p == 2.0 {
                    0.5 * u.coords().iter().map(|&c| c * c).sum::<f64>()
                } else {
                    u.coords()
                        .iter()
                        .map(|&c| c.abs().powf(self.p))
                        .sum::<f64>()
                        / self.p
                }
            }
            PenaltyKind::QuadraticL1 => {
                let quad: f64 = u.coords().iter().map(|&c| c * c).sum();
                let l1: f64 = u.coords().iter().map(|&c| c.abs()).sum();
                0.5 * quad + self.beta * l1
            }
        }
    }

    /// The deterministic subgradient selection `gamma in d phi(u)`.
    ///
    /// Power-norm: the exact gradient `sign(u_i)|u_i|^{p-1}`. Quadratic-l1:
    /// `u_i + beta sign(u_i)` with `sign(0) = 0`, the selection inverted
    /// exactly by the soft threshold.
    pub fn subgradient(&self, u: &PrimalVec) -> DualVec {
        assert_eq!(u.len(), self.space.dim(), "penalty dimension mismatch");
        let coords = match self.kind {
            PenaltyKind::PowerNorm => {
                if self.p == 2.0 {
                    u.coords().to_vec()
                } else {
                    u.coords()
                        .iter()
                        .map(|&c| c.signum() * c.abs().powf(self.p - 1.0))
                        .collect()
                }
            }
            PenaltyKind::QuadraticL1 => u
                .coords()
                .iter()
                .map(|&c| {
                    if c > 0.0 {
                        c + self.beta
                    } else if c < 0.0 {
                        c - self.beta
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        DualVec::from_raw(coords)
    }

    /// Gradient of the Fenchel conjugate, `nabla phi*`: the unique minimizer
    /// of `w -> phi(w) - <xi, w>`.
    pub fn conjugate_grad(&self, xi: &DualVec) -> PrimalVec {
        assert_eq!(xi.len(), self.space.dim(), "penalty dimension mismatch");
        let coords = match self.kind {
            PenaltyKind::PowerNorm => {
                if self.p == 2.0 {
                    xi.coords().to_vec()
                } else {
                    let inv = 1.0 / (self.p - 1.0);
                    xi.coords()
                        .iter()
                        .map(|&c| c.signum() * c.abs().powf(inv))
                        .collect()
                }
            }
            PenaltyKind::QuadraticL1 => xi
                .coords()
                .iter()
                .map(|&c| c.signum() * (c.abs() - self.beta).max(0.0))
                .collect(),
        };
        PrimalVec::from_raw(coords)
    }

    /// Bregman distance `D_gamma phi(u~, u) = phi(u~) - phi(u) - <gamma, u~ - u>`.
    ///
    /// The caller is responsible for `gamma in d phi(u)`; with a valid
    /// subgradient the value is nonnegative.
    pub fn bregman_value(&self, utilde: &PrimalVec, u: &PrimalVec, gamma: &DualVec) -> f64 {
        assert_eq!(utilde.len(), self.space.dim(), "penalty dimension mismatch");
        self.phi(utilde) - self.phi(u) - pairing(gamma, &utilde.sub(u))
    }

    /// Bregman distance together with its inputs. A value below `-1e-12`
    /// flags an invalid subgradient direction rather than failing.
    pub fn bregman(&self, utilde: &PrimalVec, u: &PrimalVec, gamma: &DualVec) -> BregmanRecord {
        let value = self.bregman_value(utilde, u, gamma);
        BregmanRecord {
            value,
            flagged: value < -1e-12,
            at: (utilde.clone(), u.clone(), gamma.clone()),
        }
    }

    /// Residual of the three-point identity
    /// `D_{g2}(u, u2) - D_{g1}(u, u1) = D_{g2}(u1, u2) + <g2 - g1, u1 - u>`,
    /// which holds exactly in exact arithmetic for any subgradients
    /// `g_i in d phi(u_i)`.
    pub fn check_three_point(
        &self,
        u: &PrimalVec,
        u1: &PrimalVec,
        u2: &PrimalVec,
        gamma1: &DualVec,
        gamma2: &DualVec,
    ) -> f64 {
        let lhs = self.bregman_value(u, u2, gamma2) - self.bregman_value(u, u1, gamma1);
        let rhs = self.bregman_value(u1, u2, gamma2) + pairing(&gamma2.sub(gamma1), &u1.sub(u));
        (lhs - rhs).abs()
    }
}

/// Evaluated Bregman distance with the triple it was evaluated at.
#[derive(Clone, Debug)]
pub struct BregmanRecord {
    pub value: f64,
    /// Set when the value is below `-1e-12`, signalling that `gamma` was not
    /// a valid subgradient at `u`.
    pub flagged: bool,
    pub at: (PrimalVec, PrimalVec, DualVec),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn primal(v: &[f64]) -> PrimalVec {
        PrimalVec::from_coords(v.to_vec())
    }

    fn power(dim: usize, p: f64) -> Penalty {
        let space = SpaceModel::new(dim, p).unwrap();
        Penalty::power_norm(space, p).unwrap()
    }

    fn ql1(dim: usize, beta: f64) -> Penalty {
        let space = SpaceModel::new(dim, 2.0).unwrap();
        Penalty::quadratic_l1(space, beta).unwrap()
    }

    fn random_primal(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> PrimalVec {
        PrimalVec::from_raw((0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn constructor_contracts() {
        let s2 = SpaceModel::new(3, 2.0).unwrap();
        let s3 = SpaceModel::new(3, 3.0).unwrap();
        assert!(matches!(
            Penalty::power_norm(s2, 1.5),
            Err(PenaltyError::InvalidOrder(_))
        ));
        assert!(matches!(
            Penalty::power_norm(s3, 2.0),
            Err(PenaltyError::ExponentMismatch { .. })
        ));
        assert!(matches!(
            Penalty::quadratic_l1(s3, 1.0),
            Err(PenaltyError::NotEuclidean(_))
        ));
        assert!(matches!(
            Penalty::quadratic_l1(s2, -1.0),
            Err(PenaltyError::InvalidWeight(_))
        ));
        let pen = Penalty::quadratic_l1(s2, 1.0).unwrap();
        assert_eq!(pen.c0(), 0.5);
        assert_eq!(pen.p_star(), 2.0);
    }

    #[test]
    fn phi_values() {
        let pen = power(2, 2.0);
        assert_eq!(pen.phi(&primal(&[3.0, 4.0])), 12.5);

        let pen = ql1(2, 1.0);
        assert_eq!(pen.phi(&primal(&[1.0, -2.0])), 5.5);

        let pen = power(2, 4.0);
        assert_eq!(pen.phi(&primal(&[1.0, 1.0])), 0.5);
    }

    #[test]
    fn subgradient_values() {
        let pen = power(2, 2.0);
        assert_eq!(pen.subgradient(&primal(&[3.0, 4.0])).coords(), &[3.0, 4.0]);

        let pen = ql1(3, 1.0);
        assert_eq!(
            pen.subgradient(&primal(&[2.0, 0.0, -1.0])).coords(),
            &[3.0, 0.0, -2.0]
        );

        let pen = power(2, 4.0);
        let g = pen.subgradient(&primal(&[1.0, -1.0]));
        assert!((g.coords()[0] - 1.0).abs() < 1e-14);
        assert!((g.coords()[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn subgradient_satisfies_subdifferential_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for pen in [power(4, 4.0), power(4, 2.0), ql1(4, 0.7)] {
            for _ in 0..100 {
                let u = random_primal(&mut rng, 4, 2.0);
                let gamma = pen.subgradient(&u);
                for _ in 0..10 {
                    let ut = random_primal(&mut rng, 4, 2.0);
                    let gap = pen.phi(&ut) - pen.phi(&u) - pairing(&gamma, &ut.sub(&u));
                    assert!(gap >= -1e-10, "subdifferential inequality violated");
                }
            }
        }
    }

    #[test]
    fn conjugate_grad_values() {
        let pen = ql1(3, 1.0);
        assert_eq!(
            pen.conjugate_grad(&DualVec::from_coords(vec![2.0, -0.5, -3.0]))
                .coords(),
            &[1.0, 0.0, -2.0]
        );

        let pen = power(2, 2.0);
        assert_eq!(
            pen.conjugate_grad(&DualVec::from_coords(vec![2.0, -1.0]))
                .coords(),
            &[2.0, -1.0]
        );

        let pen = power(2, 4.0);
        let u = pen.conjugate_grad(&DualVec::from_coords(vec![8.0, 0.0]));
        assert!((u.coords()[0] - 2.0).abs() < 1e-14);
        assert_eq!(u.coords()[1], 0.0);
    }

    #[test]
    fn conjugate_grad_inverts_subgradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for pen in [power(5, 2.0), power(5, 3.0), ql1(5, 0.4)] {
            for _ in 0..200 {
                let u = random_primal(&mut rng, 5, 3.0);
                let gamma = pen.subgradient(&u);
                let back = pen.conjugate_grad(&gamma);
                for (a, b) in back.coords().iter().zip(u.coords()) {
                    assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn bregman_values() {
        let pen = power(2, 2.0);
        let rec = pen.bregman(
            &primal(&[1.0, 1.0]),
            &primal(&[0.0, 0.0]),
            &DualVec::zeros(2),
        );
        assert_eq!(rec.value, 1.0);
        assert!(!rec.flagged);

        let pen = ql1(2, 0.3);
        let u = primal(&[0.5, -1.5]);
        let g = pen.subgradient(&u);
        let rec = pen.bregman(&u, &u, &g);
        assert_eq!(rec.value, 0.0);

        // hand evaluation: phi(0) - phi((1,0)) - <(2,0), (0,0)-(1,0)> = 0 - 1.5 + 2
        let pen = ql1(2, 1.0);
        let rec = pen.bregman(
            &primal(&[0.0, 0.0]),
            &primal(&[1.0, 0.0]),
            &DualVec::from_coords(vec![2.0, 0.0]),
        );
        assert!((rec.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bregman_flags_invalid_subgradient() {
        let pen = power(2, 2.0);
        // gamma far from d phi(u) drives the "distance" negative
        let rec = pen.bregman(
            &primal(&[1.0, 0.0]),
            &primal(&[0.0, 0.0]),
            &DualVec::from_coords(vec![10.0, 0.0]),
        );
        assert!(rec.value < 0.0);
        assert!(rec.flagged);
    }

    #[test]
    fn three_point_identity_residuals() {
        let pen = power(3, 2.0);
        let u = primal(&[0.3, -0.2, 0.9]);
        let g = pen.subgradient(&u);
        assert_eq!(pen.check_three_point(&u, &u, &u, &g, &g), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for pen in [power(3, 2.0), power(3, 4.0), ql1(3, 0.6)] {
            for _ in 0..300 {
                let u = random_primal(&mut rng, 3, 2.0);
                let u1 = random_primal(&mut rng, 3, 2.0);
                let u2 = random_primal(&mut rng, 3, 2.0);
                let g1 = pen.subgradient(&u1);
                let g2 = pen.subgradient(&u2);
                let scale = pen.phi(&u) + pen.phi(&u1) + pen.phi(&u2) + 1.0;
                assert!(pen.check_three_point(&u, &u1, &u2, &g1, &g2) <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn p_convexity_lower_bound_holds_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for pen in [power(4, 2.0), power(4, 4.0), ql1(4, 0.5)] {
            let space = pen.space();
            for _ in 0..1000 {
                let u = random_primal(&mut rng, 4, 2.0);
                let ut = random_primal(&mut rng, 4, 2.0);
                let gamma = pen.subgradient(&u);
                let d = pen.bregman_value(&ut, &u, &gamma);
                let gap = space.norm(&ut.sub(&u)).powf(pen.p());
                assert!(d >= pen.c0() * gap - 1e-10);
            }
        }
    }

    #[test]
    fn conjugate_upper_bound_and_hoelder_continuity() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for pen in [power(4, 2.0), power(4, 4.0), ql1(4, 0.5)] {
            let space = pen.space();
            let p_star = pen.p_star();
            let bound_coeff = 1.0 / (p_star * (2.0 * pen.c0()).powf(p_star - 1.0));
            for _ in 0..1000 {
                let u = random_primal(&mut rng, 4, 2.0);
                let ut = random_primal(&mut rng, 4, 2.0);
                let g = pen.subgradient(&u);
                let gt = pen.subgradient(&ut);
                let dual_gap = space.dual_norm(&g.sub(&gt));

                let d = pen.bregman_value(&ut, &u, &g);
                assert!(d <= bound_coeff * dual_gap.powf(p_star) + 1e-10);

                let diff = space.norm(&pen.conjugate_grad(&g).sub(&pen.conjugate_grad(&gt)));
                let hoelder = (dual_gap / (2.0 * pen.c0())).powf(1.0 / (pen.p() - 1.0));
                assert!(diff <= hoelder + 1e-10);
            }
        }
    }

    #[test]
    fn fenchel_young_equality_at_subgradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for pen in [power(4, 2.0), power(4, 3.0), ql1(4, 0.8)] {
            for _ in 0..1000 {
                let u = random_primal(&mut rng, 4, 2.0);
                let gamma = pen.subgradient(&u);
                let w = pen.conjugate_grad(&gamma);
                let phi_star = pairing(&gamma, &w) - pen.phi(&w);
                let lhs = pen.phi(&u) + phi_star;
                let rhs = pairing(&gamma, &u);
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn conjugate_grad_beats_random_competitors() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for pen in [power(3, 4.0), ql1(3, 0.5)] {
            let xi = DualVec::from_coords(vec![0.7, -1.3, 0.2]);
            let u = pen.conjugate_grad(&xi);
            let best = pen.phi(&u) - pairing(&xi, &u);
            for _ in 0..1000 {
                let w = random_primal(&mut rng, 3, 3.0);
                let value = pen.phi(&w) - pairing(&xi, &w);
                assert!(best <= value + 1e-12);
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn coords(dim: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-10.0f64..10.0, dim)
        }

        fn any_penalty() -> impl Strategy<Value = Penalty> {
            prop_oneof![
                Just(power(4, 2.0)),
                Just(power(4, 3.0)),
                Just(power(4, 4.0)),
                (0.0f64..2.0).prop_map(|beta| ql1(4, beta)),
            ]
        }

        proptest! {
            #[test]
            fn bregman_distance_is_nonnegative(
                pen in any_penalty(),
                a in coords(4),
                b in coords(4),
            ) {
                let u = PrimalVec::from_coords(a);
                let ut = PrimalVec::from_coords(b);
                let gamma = pen.subgradient(&u);
                let rec = pen.bregman(&ut, &u, &gamma);
                prop_assert!(rec.value >= -1e-12);
                prop_assert!(!rec.flagged);
            }

            #[test]
            fn conjugate_grad_minimizes_against_perturbations(
                pen in any_penalty(),
                xs in coords(4),
                dir in coords(4),
                step in 1e-4f64..1.0,
            ) {
                let xi = DualVec::from_coords(xs);
                let w = pen.conjugate_grad(&xi);
                let best = pen.phi(&w) - pairing(&xi, &w);
                let probe = PrimalVec::from_coords(
                    w.coords().iter().zip(&dir).map(|(a, d)| a + step * d).collect(),
                );
                let value = pen.phi(&probe) - pairing(&xi, &probe);
                prop_assert!(best <= value + 1e-10 * value.abs().max(1.0));
            }
        }
    }
}
