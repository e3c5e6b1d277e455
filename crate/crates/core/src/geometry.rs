//! Unit-sphere primitives and the spherical-cap occupancy ratio.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{self, Matrix};
use crate::special::reg_inc_beta;

/// Vectors shorter than this cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;
/// Tolerance on `‖v‖ = 1` for values claiming to be unit vectors.
pub const UNIT_TOL: f64 = 1e-9;

/// A direction on the unit sphere, `d ≥ 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Accepts an already unit-norm vector (within [`UNIT_TOL`]).
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.len() < 2 {
            return Err(domain(format!("unit vectors need d >= 2 (got {})", components.len())));
        }
        let n = linalg::norm(&components);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(domain(format!("vector norm {n} is not 1")));
        }
        Ok(Self(components))
    }

    /// Standard basis vector `e_axis` in `d` dimensions.
    pub fn basis(d: usize, axis: usize) -> Result<Self> {
        if axis >= d {
            return Err(Error::DimensionMismatch { expected: d, actual: axis + 1 });
        }
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        Self::new(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        linalg::dot(&self.0, &other.0)
    }

    pub fn neg(&self) -> UnitVector {
        UnitVector(self.0.iter().map(|x| -x).collect())
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Self {
        u.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// An angle in `[0, π]` radians.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);
    pub const RIGHT: Angle = Angle(FRAC_PI_2);
    pub const STRAIGHT: Angle = Angle(PI);

    pub fn new(radians: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&radians) {
            return Err(domain(format!("angle {radians} outside [0, pi]")));
        }
        Ok(Self(radians))
    }

    /// `arccos` of a cosine, clamped into `[-1, 1]` first.
    pub fn from_cos(c: f64) -> Self {
        Self(c.clamp(-1.0, 1.0).acos())
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn cos(self) -> f64 {
        self.0.cos()
    }
}

impl TryFrom<f64> for Angle {
    type Error = Error;
    fn try_from(r: f64) -> Result<Self> {
        Self::new(r)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

/// Class centers `W` stored as unit rows of an `n × d` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct CenterMatrix(Matrix);

impl CenterMatrix {
    /// Validates that every row is unit norm.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::EmptyInput("center matrix has no rows"));
        }
        if m.cols() < 2 {
            return Err(domain("center matrix needs d >= 2"));
        }
        for (i, r) in m.iter_rows().enumerate() {
            let n = linalg::norm(r);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(domain(format!("row {i} has norm {n}")));
            }
        }
        Ok(Self(m))
    }

    /// Normalizes every row, failing on a (near-)zero row.
    pub fn from_rows_normalized(mut m: Matrix) -> Result<Self> {
        for i in 0..m.rows() {
            let u = normalize(m.row(i))?;
            m.row_mut(i).copy_from_slice(u.as_slice());
        }
        Self::new(m)
    }

    pub fn from_unit_vectors(rows: &[UnitVector]) -> Result<Self> {
        let raw: Vec<Vec<f64>> = rows.iter().map(|u| u.as_slice().to_vec()).collect();
        Self::new(Matrix::from_rows(&raw)?)
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl TryFrom<Matrix> for CenterMatrix {
    type Error = Error;
    fn try_from(m: Matrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<CenterMatrix> for Matrix {
    fn from(c: CenterMatrix) -> Matrix {
        c.0
    }
}

pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    let n = linalg::norm(v);
    if !(n > MIN_NORM) || !n.is_finite() {
        return Err(Error::ZeroVector { norm: n });
    }
    UnitVector::new(v.iter().map(|x| x / n).collect())
}

pub fn angle_between(u: &UnitVector, v: &UnitVector) -> Result<Angle> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch { expected: u.dim(), actual: v.dim() });
    }
    Ok(Angle::from_cos(u.dot(v)))
}

/// Uniform direction on the sphere: isotropic Gaussian, then normalize.
pub fn sample_uniform_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<UnitVector> {
    if d < 2 {
        return Err(domain(format!("sphere dimension must be >= 2 (got {d})")));
    }
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&g) {
            return Ok(u);
        }
    }
}

/// Fraction of the unit sphere in `R^d` lying within angle `rho` of a point:
/// `½·I_{sin²ρ}((d−1)/2, ½)` for `ρ ≤ π/2`, and the complement of the
/// opposite cap beyond that.
pub fn occupancy_ratio(rho: Angle, d: usize) -> Result<f64> {
    if d < 2 {
        return Err(domain(format!("sphere dimension must be >= 2 (got {d})")));
    }
    let r = rho.radians();
    if r > FRAC_PI_2 {
        return Ok(1.0 - occupancy_ratio(Angle(PI - r), d)?);
    }
    let s = r.sin();
    let a = (d as f64 - 1.0) / 2.0;
    Ok(0.5 * reg_inc_beta((s * s).min(1.0), a, 0.5)?)
}
