//! Regressor matrices.

use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{LinalgError, Spd};
use crate::rng::{stream_rng, StreamTag};

use super::ModelError;

/// `n x p` design whose rows are the regressors `Psi_i`. The Gram matrix is
/// checked for full rank at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    rows: DMatrix<f64>,
}

impl Design {
    pub fn new(rows: DMatrix<f64>) -> Result<Self, ModelError> {
        let (n, p) = rows.shape();
        if n == 0 || p == 0 {
            return Err(ModelError::InvalidSpec("design must have at least one row and column".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidSpec("design has non-finite entries".into()));
        }
        if n < p {
            return Err(ModelError::RankDeficient { rank_ratio: 0.0 });
        }
        let gram = Spd::new(rows.transpose() * &rows)?;
        gram.ensure_nonsingular().map_err(|e| match e {
            LinalgError::Singular { ratio } => ModelError::RankDeficient { rank_ratio: ratio },
            other => ModelError::Linalg(other),
        })?;
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(ModelError::InvalidSpec("design rows have unequal lengths".into()));
        }
        Self::new(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }

    /// Row `i` is `e_{i mod p}`; each basis vector appears `m` times.
    pub fn orthonormal_replicated(p: usize, m: usize) -> Result<Self, ModelError> {
        let n = p * m;
        Self::new(DMatrix::from_fn(n, p, |i, j| if i % p == j { 1.0 } else { 0.0 }))
    }

    /// I.i.d. standard normal rows from a fixed seed; with `intercept` the
    /// first column is set to 1.
    pub fn standard_normal(n: usize, p: usize, seed: u64, intercept: bool) -> Result<Self, ModelError> {
        let mut rng = stream_rng(seed, 0, StreamTag::Design);
        let mut m = DMatrix::zeros(n, p);
        for i in 0..n {
            for j in 0..p {
                m[(i, j)] = if intercept && j == 0 { 1.0 } else { StandardNormal.sample(&mut rng) };
            }
        }
        Self::new(m)
    }

    /// Headerless CSV, one observation per line.
    pub fn from_csv(path: &Path) -> Result<Self, ModelError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        ModelError::InvalidSpec(format!("{}: line {}: '{f}' is not a number", path.display(), line + 1))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    /// Natural parameters `w_i = Psi_i^T theta`.
    pub fn index(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.rows * theta
    }

    /// `sum_i c_i Psi_i`.
    pub fn weighted_sum(&self, c: DVectorView<f64>) -> DVector<f64> {
        self.rows.transpose() * c
    }

    /// `sum_i c_i Psi_i Psi_i^T`.
    pub fn weighted_gram(&self, c: &[f64]) -> DMatrix<f64> {
        let p = self.p();
        let mut out = DMatrix::zeros(p, p);
        for (i, &ci) in c.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            let r = self.rows.row(i);
            for a in 0..p {
                let ra = ci * r[a];
                for b in a..p {
                    out[(a, b)] += ra * r[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                out[(a, b)] = out[(b, a)];
            }
        }
        out
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.weighted_gram(&vec![1.0; self.n()])
    }

    /// Same design with every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self, ModelError> {
        Self::new(&self.rows * c)
    }
}
