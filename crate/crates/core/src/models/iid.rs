//! Smooth one-sample families with `n` i.i.d. observations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::marginal::Marginal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IidFamily {
    /// `theta = (mu, log sigma)` for `N(mu, sigma^2)`.
    NormalLocationScale,
    /// `theta = log lambda` for `Exp(lambda)`.
    ExponentialRate,
    /// Location of the standard logistic law. Expectations under a foreign
    /// truth have no closed form and are taken over an oracle sample.
    LogisticLocation,
}

impl IidFamily {
    pub fn dim(self) -> usize {
        match self {
            IidFamily::NormalLocationScale => 2,
            IidFamily::ExponentialRate | IidFamily::LogisticLocation => 1,
        }
    }

    pub fn law(self, theta: &DVector<f64>) -> Marginal {
        match self {
            IidFamily::NormalLocationScale => Marginal::Normal { mean: theta[0], sd: theta[1].exp() },
            IidFamily::ExponentialRate => Marginal::Exponential { rate: theta[0].exp(), negated: false },
            IidFamily::LogisticLocation => Marginal::Logistic { loc: theta[0], scale: 1.0 },
        }
    }

    pub fn needs_oracle(self) -> bool {
        matches!(self, IidFamily::LogisticLocation)
    }

    pub fn loglik(self, y: f64, theta: &DVector<f64>) -> f64 {
        match self {
            IidFamily::NormalLocationScale => {
                let (mu, s) = (theta[0], theta[1]);
                -s - 0.5 * (y - mu).powi(2) * (-2.0 * s).exp() - 0.5 * (2.0 * PI).ln()
            }
            IidFamily::ExponentialRate => theta[0] - theta[0].exp() * y,
            IidFamily::LogisticLocation => {
                let u = y - theta[0];
                -u.abs() - 2.0 * (-u.abs()).exp().ln_1p()
            }
        }
    }

    pub fn gradient(self, y: f64, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            IidFamily::NormalLocationScale => {
                let (mu, s) = (theta[0], theta[1]);
                let w = (-2.0 * s).exp();
                DVector::from_vec(vec![(y - mu) * w, -1.0 + (y - mu).powi(2) * w])
            }
            IidFamily::ExponentialRate => DVector::from_element(1, 1.0 - theta[0].exp() * y),
            IidFamily::LogisticLocation => DVector::from_element(1, (0.5 * (y - theta[0])).tanh()),
        }
    }

    pub fn hessian(self, y: f64, theta: &DVector<f64>) -> DMatrix<f64> {
        match self {
            IidFamily::NormalLocationScale => {
                let (mu, s) = (theta[0], theta[1]);
                let w = (-2.0 * s).exp();
                let r = y - mu;
                DMatrix::from_row_slice(2, 2, &[-w, -2.0 * r * w, -2.0 * r * w, -2.0 * r * r * w])
            }
            IidFamily::ExponentialRate => DMatrix::from_element(1, 1, -theta[0].exp() * y),
            IidFamily::LogisticLocation => {
                let c = (0.5 * (y - theta[0])).cosh();
                DMatrix::from_element(1, 1, -0.5 / (c * c))
            }
        }
    }

    /// Closed-form `(E l, E grad l, -E hess l)` for one observation with law `law`.
    pub fn expected(self, law: &Marginal, theta: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        match self {
            IidFamily::NormalLocationScale => {
                let (mu, s) = (theta[0], theta[1]);
                let w = (-2.0 * s).exp();
                let c = law.mean() - mu;
                let q = law.variance() + c * c;
                let el = -s - 0.5 * q * w - 0.5 * (2.0 * PI).ln();
                let g = DVector::from_vec(vec![c * w, -1.0 + q * w]);
                let h = DMatrix::from_row_slice(2, 2, &[w, 2.0 * c * w, 2.0 * c * w, 2.0 * q * w]);
                Some((el, g, h))
            }
            IidFamily::ExponentialRate => {
                let m = law.mean();
                let e = theta[0].exp();
                Some((theta[0] - e * m, DVector::from_element(1, 1.0 - e * m), DMatrix::from_element(1, 1, e * m)))
            }
            IidFamily::LogisticLocation => None,
        }
    }

    /// Closed-form maximiser of `E l` under `law`.
    pub fn closed_form_target(self, law: &Marginal) -> Option<DVector<f64>> {
        match self {
            IidFamily::NormalLocationScale => {
                let v = law.variance();
                (v.is_finite() && v > 0.0).then(|| DVector::from_vec(vec![law.mean(), 0.5 * v.ln()]))
            }
            IidFamily::ExponentialRate => {
                let m = law.mean();
                (m > 0.0 && m.is_finite()).then(|| DVector::from_element(1, -m.ln()))
            }
            IidFamily::LogisticLocation => None,
        }
    }

    /// Closed-form covariance of the per-observation score at `theta`.
    pub fn score_covariance(self, law: &Marginal, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        match self {
            IidFamily::NormalLocationScale => {
                let (mu, s) = (theta[0], theta[1]);
                let w2 = (-4.0 * s).exp();
                let raw = law.raw_moments();
                // moments of Z = Y - mu
                let c = -mu;
                let a1 = raw[1] + c;
                let a2 = raw[2] + 2.0 * c * raw[1] + c * c;
                let a3 = raw[3] + 3.0 * c * raw[2] + 3.0 * c * c * raw[1] + c.powi(3);
                let a4 = raw[4] + 4.0 * c * raw[3] + 6.0 * c * c * raw[2] + 4.0 * c.powi(3) * raw[1] + c.powi(4);
                let v11 = (a2 - a1 * a1) * w2;
                let v12 = (a3 - a1 * a2) * w2;
                let v22 = (a4 - a2 * a2) * w2;
                let m = DMatrix::from_row_slice(2, 2, &[v11, v12, v12, v22]);
                m.iter().all(|v| v.is_finite()).then_some(m)
            }
            IidFamily::ExponentialRate => {
                let e = theta[0].exp();
                let v = law.variance() * e * e;
                v.is_finite().then(|| DMatrix::from_element(1, 1, v))
            }
            IidFamily::LogisticLocation => None,
        }
    }

    /// Method-of-moments start from a sample.
    pub fn moment_start(self, y: &[f64]) -> DVector<f64> {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        match self {
            IidFamily::NormalLocationScale => {
                let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                DVector::from_vec(vec![mean, 0.5 * var.max(1e-12).ln()])
            }
            IidFamily::ExponentialRate => DVector::from_element(1, -(mean.max(1e-12)).ln()),
            IidFamily::LogisticLocation => {
                let mut s = y.to_vec();
                s.sort_by(f64::total_cmp);
                let med = if s.is_empty() {
                    0.0
                } else if s.len() % 2 == 1 {
                    s[s.len() / 2]
                } else {
                    0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
                };
                DVector::from_element(1, med)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IidFamily::NormalLocationScale => "normal_location_scale",
            IidFamily::ExponentialRate => "exponential_rate",
            IidFamily::LogisticLocation => "logistic_location",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_target_and_fisher() {
        let law = Marginal::Laplace { loc: 1.0, scale: 2.0 };
        let fam = IidFamily::NormalLocationScale;
        let t = fam.closed_form_target(&law).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-15);
        assert!((t[1] - 0.5 * 8f64.ln()).abs() < 1e-15);
        let (_, g, h) = fam.expected(&law, &t).unwrap();
        assert!(g.norm() < 1e-14);
        assert!((h[(0, 0)] - 1.0 / 8.0).abs() < 1e-15 && (h[(1, 1)] - 2.0).abs() < 1e-14);
        let v = fam.score_covariance(&law, &t).unwrap();
        // kurtosis of Laplace is 6: Var((Z^2)/v) = 24b^4/v^2 - 1 = 5
        assert!((v[(1, 1)] - 5.0).abs() < 1e-12);
        assert!(v[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn exponential_target() {
        let law = Marginal::Exponential { rate: 3.0, negated: false };
        let t = IidFamily::ExponentialRate.closed_form_target(&law).unwrap();
        assert!((t[0] - 3f64.ln()).abs() < 1e-14);
    }
}
