//! Direct transcriptions used as independent references for the library.

use fsmle::estimation::lad_objective;
use fsmle::models::Design;
use nalgebra::{DMatrix, DVector};

/// `zq(x, Q)` from the two-branch formula.
pub fn err_bound(x: f64, q: f64, gd: f64) -> f64 {
    let root = (x + q).sqrt();
    if 1.0 + root <= gd {
        (1.0 + root).powi(2)
    } else {
        1.0 + (2.0 * (x + q) / gd + gd).powi(2)
    }
}

/// `z(x, B)` computed from `B` and `g` alone.
pub fn quad_tail(b: &DMatrix<f64>, g: f64, x: f64) -> f64 {
    let mu = 2.0 / 3.0;
    let dim = b.trace();
    let b2 = b * b;
    let va = (2.0 * b2.trace()).sqrt();
    let lam = b.clone().symmetric_eigen().eigenvalues.max();
    let yc = (g * g / (mu * mu) - dim / mu).sqrt();
    let gc = (g * g - mu * dim).sqrt();
    let det = (DMatrix::identity(b.nrows(), b.nrows()) - b2 * (mu / lam)).determinant();
    let xc = 0.5 * (mu * yc * yc + det.ln());
    if x <= va / 18.0 {
        dim + 2.0 * va * x.sqrt()
    } else if x <= xc {
        dim + 6.0 * x
    } else {
        (yc + 2.0 * (x - xc) / gc).powi(2)
    }
}

/// Least squares via a QR factorisation, independent of the Newton solver.
pub fn ols(design: &Design, y: &[f64]) -> DVector<f64> {
    let qr = design.matrix().clone().qr();
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    qr.r().solve_upper_triangular(&qty).unwrap()
}

/// Exhaustive LAD optimum: some minimiser interpolates `p` observations.
pub fn lad_vertex(design: &Design, y: &[f64]) -> f64 {
    let (n, p) = (design.n(), design.p());
    let mut best = f64::INFINITY;
    let mut visit = |idx: &[usize]| {
        let a = DMatrix::from_fn(p, p, |r, c| design.matrix()[(idx[r], c)]);
        let b = DVector::from_iterator(p, idx.iter().map(|&i| y[i]));
        if let Some(theta) = a.lu().solve(&b) {
            best = best.min(lad_objective(design, y, &theta));
        }
    };
    match p {
        1 => (0..n).for_each(|i| visit(&[i])),
        2 => {
            for i in 0..n {
                for j in i + 1..n {
                    visit(&[i, j]);
                }
            }
        }
        _ => unreachable!("oracle covers p <= 2"),
    }
    best
}
