//! Dense symmetric matrix helpers.
//!
//! Every square root and inverse in the crate goes through [`Spd`], which
//! keeps one eigendecomposition and applies a single clipping policy:
//! eigenvalues above `-CLIP_REL * lambda_max` are treated as nonnegative and
//! clipped to zero, anything below that is rejected.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Relative eigenvalue clipping threshold.
pub const CLIP_REL: f64 = 1e-10;
/// Relative symmetry tolerance accepted by [`Spd::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix is singular (min/max eigenvalue ratio {ratio:e})")]
    Singular { ratio: f64 },
    #[error("matrix has non-finite entries")]
    NonFinite,
}

/// Symmetric positive semidefinite matrix with a cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct Spd {
    matrix: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl Spd {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, LinalgError> {
        let (rows, cols) = matrix.shape();
        if rows != cols {
            return Err(LinalgError::NotSquare { rows, cols });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asymmetry = (&matrix - matrix.transpose()).amax();
        if asymmetry > SYMMETRY_TOL * scale {
            return Err(LinalgError::NotSymmetric { asymmetry });
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let lambda_max = eig.eigenvalues.max().max(0.0);
        let floor = -CLIP_REL * lambda_max;
        let min = eig.eigenvalues.min();
        if min < floor || (lambda_max == 0.0 && min < 0.0) {
            return Err(LinalgError::NotPsd { min_eigenvalue: min });
        }
        let eigenvalues = eig.eigenvalues.map(|v| v.max(0.0));
        Ok(Self { matrix: sym, eigenvalues, eigenvectors: eig.eigenvectors })
    }

    pub fn identity(p: usize) -> Self {
        Self::new(DMatrix::identity(p, p)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.max()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.min()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Fails unless `min eigenvalue >= CLIP_REL * max eigenvalue`.
    pub fn ensure_nonsingular(&self) -> Result<(), LinalgError> {
        let max = self.max_eigenvalue();
        let min = self.min_eigenvalue();
        if max <= 0.0 || min < CLIP_REL * max {
            let ratio = if max > 0.0 { min / max } else { 0.0 };
            return Err(LinalgError::Singular { ratio });
        }
        Ok(())
    }

    /// `Q f(Λ) Qᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * f(self.eigenvalues[j]));
        let out = scaled * q.transpose();
        (&out + out.transpose()) * 0.5
    }

    /// Symmetric square root.
    pub fn sqrt(&self) -> DMatrix<f64> {
        self.spectral_map(f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> Result<DMatrix<f64>, LinalgError> {
        self.ensure_nonsingular()?;
        Ok(self.spectral_map(|v| 1.0 / v.sqrt()))
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>, LinalgError> {
        self.ensure_nonsingular()?;
        Ok(self.spectral_map(|v| 1.0 / v))
    }

    /// `vᵀ M v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.matrix * v))
    }

    /// `‖M^{1/2} v‖`.
    pub fn norm_of(&self, v: &DVector<f64>) -> f64 {
        self.quad_form(v).max(0.0).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Result<Self, LinalgError> {
        Spd::new(&self.matrix * c)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.matrix)
    }
}

impl PartialEq for Spd {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

impl Serialize for Spd {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Spd {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(serde::de::Error::custom("matrix rows must form a square"));
        }
        let m = DMatrix::from_fn(p, p, |i, j| rows[i][j]);
        Spd::new(m).map_err(serde::de::Error::custom)
    }
}

/// Row-major nested vectors.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Serde adapter writing a square `DMatrix` as row-major nested arrays.
pub mod rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, serializer: S) -> Result<S::Ok, S::Error> {
        matrix_rows(m).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut vals: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn symmetric_operator_norm(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).into_iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Solves `A x = b` for symmetric positive definite `A`, falling back to a
/// ridge-stabilised Cholesky and finally to LU when `A` is ill conditioned.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let scale = a.diagonal().amax().max(1.0);
    for k in [1e-12, 1e-10, 1e-8, 1e-6] {
        let ridged = a + DMatrix::identity(a.nrows(), a.ncols()) * (k * scale);
        if let Some(ch) = ridged.cholesky() {
            return Some(ch.solve(b));
        }
    }
    a.clone().lu().solve(b)
}

const PRIMES: [u64; 24] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89];

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut f = 1.0 / base as f64;
    while index > 0 {
        result += f * (index % base) as f64;
        index /= base;
        f /= base as f64;
    }
    result
}

/// Deterministic unit directions in `R^p` for sphere-sup approximations.
///
/// The set is symmetric under negation: the `±e_j` axes come first, then
/// antithetic pairs of Halton points pushed through the normal quantile.
/// For `p = 1` only `{+1, -1}` exist.
pub fn quasi_random_directions(p: usize, count: usize) -> Vec<DVector<f64>> {
    assert!(p >= 1, "dimension must be positive");
    if p == 1 {
        return vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)];
    }
    assert!(p <= PRIMES.len(), "quasi-random directions support p <= {}", PRIMES.len());
    let count = count.max(2);
    let mut dirs = Vec::with_capacity(count);
    for j in 0..p {
        if dirs.len() + 2 > count {
            break;
        }
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        dirs.push(e.clone());
        dirs.push(-e);
    }
    let normal = Normal::standard();
    let mut index = 1u64;
    while dirs.len() < count {
        let z = DVector::from_fn(p, |j, _| {
            let u = radical_inverse(index, PRIMES[j]).clamp(1e-12, 1.0 - 1e-12);
            normal.inverse_cdf(u)
        });
        index += 1;
        let norm = z.norm();
        if norm < 1e-9 {
            continue;
        }
        let d = z / norm;
        dirs.push(d.clone());
        if dirs.len() < count {
            dirs.push(-d);
        }
    }
    dirs
}
