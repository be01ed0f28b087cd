//! Finite-dimensional sequence-space model: coordinate vectors with an
//! `l^r` norm, the dual `l^{r*}` norm, and the single-valued duality
//! mappings `J_s` that exist on these spaces for every gauge exponent
//! `s > 1`.
//!
//! Primal and dual vectors are kept as distinct types so that a vector and
//! a functional acting on it cannot be mixed up by accident. The duality
//! between `l^r` and `l^{r*}` is realized by the ordinary coordinate
//! pairing.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("norm exponent must satisfy r > 1, got {0}")]
    InvalidExponent(f64),
    #[error("space dimension must be at least 1")]
    ZeroDimension,
    #[error("coordinate {index} is not finite: {value}")]
    NonFinite { index: usize, value: f64 },
}

/// A model of a uniformly smooth Banach space: `R^dim` carrying the `l^r`
/// norm with `r > 1`. The dual space is `R^dim` with the `l^{r*}` norm,
/// `r* = r/(r-1)`; it is derived on demand and never stored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceModel {
    dim: usize,
    r: f64,
}

impl SpaceModel {
    pub fn new(dim: usize, r: f64) -> Result<Self, GeometryError> {
        if dim == 0 {
            return Err(GeometryError::ZeroDimension);
        }
        if !(r > 1.0) || !r.is_finite() {
            return Err(GeometryError::InvalidExponent(r));
        }
        Ok(Self { dim, r })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Norm exponent `r` of the primal space.
    pub fn exponent(&self) -> f64 {
        self.r
    }

    /// Dual exponent `r* = r/(r-1)`.
    pub fn dual_exponent(&self) -> f64 {
        self.r / (self.r - 1.0)
    }

    /// `l^r` norm of a primal vector.
    ///
    /// Panics on dimension mismatch.
    pub fn norm(&self, x: &PrimalVec) -> f64 {
        assert_eq!(x.len(), self.dim, "primal vector dimension mismatch");
        lr_norm(x.coords(), self.r)
    }

    /// `l^{r*}` norm of a dual vector.
    ///
    /// Panics on dimension mismatch.
    pub fn dual_norm(&self, g: &DualVec) -> f64 {
        assert_eq!(g.len(), self.dim, "dual vector dimension mismatch");
        lr_norm(g.coords(), self.dual_exponent())
    }

    /// Single-valued duality mapping `J_s` with gauge `t -> t^{s-1}`.
    ///
    /// For `x != 0` the image is
    /// `y_i = ||x||^{s-r} sign(x_i) |x_i|^{r-1}`, the unique functional with
    /// `<y, x> = ||x||^s` and `||y||_{r*} = ||x||^{s-1}`. `J_s(0) = 0` by
    /// continuity.
    ///
    /// Panics on dimension mismatch, `s <= 1`, or non-finite input.
    pub fn duality_map(&self, s: f64, x: &PrimalVec) -> DualVec {
        assert_eq!(x.len(), self.dim, "primal vector dimension mismatch");
        assert!(s > 1.0, "gauge exponent must satisfy s > 1, got {s}");
        assert!(
            x.coords().iter().all(|c| c.is_finite()),
            "duality_map requires finite input"
        );
        let nrm = self.norm(x);
        if nrm == 0.0 {
            return DualVec::zeros(self.dim);
        }
        let scale = if s == self.r {
            1.0
        } else {
            nrm.powf(s - self.r)
        };
        let coords = if self.r == 2.0 {
            // |x|^{r-1} sign(x) = x exactly when r = 2
            x.coords().iter().map(|&c| scale * c).collect()
        } else {
            x.coords()
                .iter()
                .map(|&c| scale * c.signum() * c.abs().powf(self.r - 1.0))
                .collect()
        };
        DualVec { coords }
    }
}

fn lr_norm(coords: &[f64], r: f64) -> f64 {
    if r == 2.0 {
        coords.iter().map(|&c| c * c).sum::<f64>().sqrt()
    } else {
        coords
            .iter()
            .map(|&c| c.abs().powf(r))
            .sum::<f64>()
            .powf(1.0 / r)
    }
}

/// Coordinate vector in a primal space.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalVec {
    coords: Vec<f64>,
}

/// Coordinate vector in a dual space.
#[derive(Clone, Debug, PartialEq)]
pub struct DualVec {
    coords: Vec<f64>,
}

fn check_finite(coords: &[f64]) -> Result<(), GeometryError> {
    for (index, &value) in coords.iter().enumerate() {
        if !value.is_finite() {
            return Err(GeometryError::NonFinite { index, value });
        }
    }
    Ok(())
}

macro_rules! vec_impl {
    ($t:ident) => {
        impl $t {
            /// Validating constructor; rejects NaN and infinite coordinates.
            pub fn new(coords: Vec<f64>) -> Result<Self, GeometryError> {
                check_finite(&coords)?;
                Ok(Self { coords })
            }

            /// Panicking constructor for literals and trusted intermediate data.
            pub fn from_coords(coords: Vec<f64>) -> Self {
                Self::new(coords).expect("non-finite coordinate")
            }

            pub fn zeros(dim: usize) -> Self {
                Self {
                    coords: vec![0.0; dim],
                }
            }

            pub fn len(&self) -> usize {
                self.coords.len()
            }

            pub fn is_empty(&self) -> bool {
                self.coords.is_empty()
            }

            pub fn coords(&self) -> &[f64] {
                &self.coords
            }

            pub fn into_coords(self) -> Vec<f64> {
                self.coords
            }

            pub fn is_finite(&self) -> bool {
                self.coords.iter().all(|c| c.is_finite())
            }

            /// Coordinate-wise difference `self - other`.
            pub fn sub(&self, other: &Self) -> Self {
                assert_eq!(self.len(), other.len(), "dimension mismatch");
                Self {
                    coords: self
                        .coords
                        .iter()
                        .zip(&other.coords)
                        .map(|(a, b)| a - b)
                        .collect(),
                }
            }

            /// Internal escape hatch: wraps coordinates without the finiteness
            /// check. Used on hot paths whose inputs were already validated.
            pub(crate) fn from_raw(coords: Vec<f64>) -> Self {
                Self { coords }
            }
        }
    };
}

vec_impl!(PrimalVec);
vec_impl!(DualVec);

/// Duality pairing `<gamma, x> = sum_i gamma_i x_i`.
///
/// Panics on dimension mismatch.
pub fn pairing(gamma: &DualVec, x: &PrimalVec) -> f64 {
    assert_eq!(gamma.len(), x.len(), "pairing dimension mismatch");
    gamma
        .coords()
        .iter()
        .zip(x.coords())
        .map(|(g, c)| g * c)
        .sum()
}
