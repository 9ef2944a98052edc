//! Univariate response laws used as the truth for each observation.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson as PoissonSampler, StandardNormal, StudentT as StudentTSampler};
use serde::{Deserialize, Serialize};
use statrs::distribution::{
    Continuous, ContinuousCDF, Discrete, DiscreteCDF, Normal as StNormal, Poisson as StPoisson, StudentsT,
};
use std::f64::consts::PI;

/// Law of a single response `Y_i`.
///
/// `Exponential { negated: true }` is the law of `-X` with `X ~ Exp(rate)`;
/// it is the in-family response of the exponential GLM, whose mean map
/// `d'(w) = -1/w` is negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Marginal {
    Normal {
        mean: f64,
        sd: f64,
    },
    Laplace {
        loc: f64,
        scale: f64,
    },
    StudentT {
        loc: f64,
        scale: f64,
        df: f64,
    },
    Logistic {
        loc: f64,
        scale: f64,
    },
    Bernoulli {
        p: f64,
    },
    Poisson {
        lambda: f64,
    },
    Exponential {
        rate: f64,
        #[serde(default)]
        negated: bool,
    },
    Mixture {
        contaminant_weight: f64,
        base: Box<Marginal>,
        contaminant: Box<Marginal>,
    },
}

fn std_normal() -> StNormal {
    StNormal::standard()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^{-|u|})` without overflow.
fn log1p_exp_neg_abs(u: f64) -> f64 {
    (-u.abs()).exp().ln_1p()
}

impl Marginal {
    /// Checks parameter ranges.
    pub fn validate(&self) -> Result<(), String> {
        let ok = match self {
            Marginal::Normal { mean, sd } => mean.is_finite() && *sd > 0.0 && sd.is_finite(),
            Marginal::Laplace { loc, scale } | Marginal::Logistic { loc, scale } => {
                loc.is_finite() && *scale > 0.0 && scale.is_finite()
            }
            Marginal::StudentT { loc, scale, df } => loc.is_finite() && *scale > 0.0 && *df > 0.0 && df.is_finite(),
            Marginal::Bernoulli { p } => (0.0..=1.0).contains(p),
            Marginal::Poisson { lambda } => *lambda > 0.0 && lambda.is_finite(),
            Marginal::Exponential { rate, .. } => *rate > 0.0 && rate.is_finite(),
            Marginal::Mixture { contaminant_weight, base, contaminant } => {
                base.validate()?;
                contaminant.validate()?;
                (0.0..=1.0).contains(contaminant_weight)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid law parameters: {self:?}"))
        }
    }

    pub fn is_continuous(&self) -> bool {
        match self {
            Marginal::Bernoulli { .. } | Marginal::Poisson { .. } => false,
            Marginal::Mixture { base, contaminant, .. } => base.is_continuous() && contaminant.is_continuous(),
            _ => true,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Marginal::Normal { mean, .. } => *mean,
            Marginal::Laplace { loc, .. } | Marginal::Logistic { loc, .. } => *loc,
            Marginal::StudentT { loc, df, .. } => {
                if *df > 1.0 {
                    *loc
                } else {
                    f64::NAN
                }
            }
            Marginal::Bernoulli { p } => *p,
            Marginal::Poisson { lambda } => *lambda,
            Marginal::Exponential { rate, negated } => sign(*negated) / rate,
            Marginal::Mixture { contaminant_weight: w, base, contaminant } => {
                (1.0 - w) * base.mean() + w * contaminant.mean()
            }
        }
    }

    pub fn variance(&self) -> f64 {
        let m = self.raw_moments();
        m[2] - m[1] * m[1]
    }

    pub fn sd(&self) -> f64 {
        self.variance().max(0.0).sqrt()
    }

    /// Central moments `E(Y - EY)^k`, `k = 0..=4`. Infinite when they do not exist.
    pub fn central_moments(&self) -> [f64; 5] {
        match self {
            Marginal::Normal { sd, .. } => {
                let v = sd * sd;
                [1.0, 0.0, v, 0.0, 3.0 * v * v]
            }
            Marginal::Laplace { scale: b, .. } => {
                let b2 = b * b;
                [1.0, 0.0, 2.0 * b2, 0.0, 24.0 * b2 * b2]
            }
            Marginal::Logistic { scale: s, .. } => {
                let s2 = s * s;
                [1.0, 0.0, PI * PI * s2 / 3.0, 0.0, 7.0 * PI.powi(4) * s2 * s2 / 15.0]
            }
            Marginal::StudentT { scale: s, df: nu, .. } => {
                let s2 = s * s;
                let var = if *nu > 2.0 { nu / (nu - 2.0) * s2 } else { f64::INFINITY };
                let m4 = if *nu > 4.0 { 3.0 * nu * nu * s2 * s2 / ((nu - 2.0) * (nu - 4.0)) } else { f64::INFINITY };
                let m3 = if *nu > 3.0 { 0.0 } else { f64::NAN };
                [1.0, 0.0, var, m3, m4]
            }
            Marginal::Bernoulli { p } => {
                let q = 1.0 - p;
                [1.0, 0.0, p * q, p * q * (q - p), p * q * (1.0 - 3.0 * p * q)]
            }
            Marginal::Poisson { lambda: l } => [1.0, 0.0, *l, *l, l + 3.0 * l * l],
            Marginal::Exponential { rate: a, negated } => {
                let s = sign(*negated);
                [1.0, 0.0, 1.0 / (a * a), s * 2.0 / a.powi(3), 9.0 / a.powi(4)]
            }
            Marginal::Mixture { .. } => {
                let m = self.raw_moments();
                central_from_raw(&m)
            }
        }
    }

    /// Raw moments `E Y^k`, `k = 0..=4`.
    pub fn raw_moments(&self) -> [f64; 5] {
        match self {
            Marginal::Mixture { contaminant_weight: w, base, contaminant } => {
                let a = base.raw_moments();
                let b = contaminant.raw_moments();
                std::array::from_fn(|k| (1.0 - w) * a[k] + w * b[k])
            }
            _ => raw_from_central(self.mean(), &self.central_moments()),
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        match self {
            Marginal::Normal { mean, sd } => std_normal().cdf((y - mean) / sd),
            Marginal::Laplace { loc, scale } => {
                let z = (y - loc) / scale;
                if z < 0.0 {
                    0.5 * z.exp()
                } else {
                    1.0 - 0.5 * (-z).exp()
                }
            }
            Marginal::Logistic { loc, scale } => sigmoid((y - loc) / scale),
            Marginal::StudentT { loc, scale, df } => student(*df).cdf((y - loc) / scale),
            Marginal::Bernoulli { p } => {
                if y < 0.0 {
                    0.0
                } else if y < 1.0 {
                    1.0 - p
                } else {
                    1.0
                }
            }
            Marginal::Poisson { lambda } => {
                if y < 0.0 {
                    0.0
                } else {
                    StPoisson::new(*lambda).expect("valid rate").cdf(y.floor() as u64)
                }
            }
            Marginal::Exponential { rate, negated } => {
                if *negated {
                    if y >= 0.0 {
                        1.0
                    } else {
                        (rate * y).exp()
                    }
                } else if y <= 0.0 {
                    0.0
                } else {
                    -(-rate * y).exp_m1()
                }
            }
            Marginal::Mixture { contaminant_weight: w, base, contaminant } => {
                (1.0 - w) * base.cdf(y) + w * contaminant.cdf(y)
            }
        }
    }

    /// Lebesgue density, `None` for laws with atoms.
    pub fn density(&self, y: f64) -> Option<f64> {
        Some(match self {
            Marginal::Normal { mean, sd } => std_normal().pdf((y - mean) / sd) / sd,
            Marginal::Laplace { loc, scale } => 0.5 * (-(y - loc).abs() / scale).exp() / scale,
            Marginal::Logistic { loc, scale } => {
                let s = sigmoid((y - loc) / scale);
                s * (1.0 - s) / scale
            }
            Marginal::StudentT { loc, scale, df } => student(*df).pdf((y - loc) / scale) / scale,
            Marginal::Exponential { rate, negated } => {
                let x = if *negated { -y } else { y };
                if x < 0.0 {
                    0.0
                } else {
                    rate * (-rate * x).exp()
                }
            }
            Marginal::Mixture { contaminant_weight: w, base, contaminant } => {
                (1.0 - w) * base.density(y)? + w * contaminant.density(y)?
            }
            Marginal::Bernoulli { .. } | Marginal::Poisson { .. } => return None,
        })
    }

    /// `E|Y - t|`.
    pub fn mean_abs_dev(&self, t: f64) -> f64 {
        match self {
            Marginal::Normal { mean, sd } => {
                let z = (t - mean) / sd;
                let n = std_normal();
                sd * (2.0 * n.pdf(z) + z * (2.0 * n.cdf(z) - 1.0))
            }
            Marginal::Laplace { loc, scale } => {
                let d = (t - loc).abs();
                d + scale * (-d / scale).exp()
            }
            Marginal::Logistic { loc, scale } => {
                let u = (t - loc) / scale;
                scale * (u.abs() + 2.0 * log1p_exp_neg_abs(u))
            }
            Marginal::StudentT { loc, scale, df } => {
                if *df <= 1.0 {
                    return f64::INFINITY;
                }
                let z = (t - loc) / scale;
                let d = student(*df);
                scale * (z * (2.0 * d.cdf(z) - 1.0) + 2.0 * (df + z * z) / (df - 1.0) * d.pdf(z))
            }
            Marginal::Bernoulli { p } => p * (1.0 - t).abs() + (1.0 - p) * t.abs(),
            Marginal::Poisson { lambda } => {
                // E|Y - t| = (EY - t) + 2 E(t - Y)^+
                let pois = StPoisson::new(*lambda).expect("valid rate");
                let mut below = 0.0;
                let mut k = 0u64;
                while (k as f64) < t {
                    below += (t - k as f64) * pois.pmf(k);
                    k += 1;
                }
                lambda - t + 2.0 * below
            }
            Marginal::Exponential { rate, negated } => {
                let s = if *negated { -t } else { t };
                if s <= 0.0 {
                    1.0 / rate - s
                } else {
                    1.0 / rate - s + 2.0 * (s + (-rate * s).exp_m1() / rate)
                }
            }
            Marginal::Mixture { contaminant_weight: w, base, contaminant } => {
                (1.0 - w) * base.mean_abs_dev(t) + w * contaminant.mean_abs_dev(t)
            }
        }
    }

    /// `log E exp(λY)`, `None` where the moment generating function is infinite.
    pub fn log_mgf(&self, lambda: f64) -> Option<f64> {
        if lambda == 0.0 {
            return Some(0.0);
        }
        let v = match self {
            Marginal::Normal { mean, sd } => lambda * mean + 0.5 * lambda * lambda * sd * sd,
            Marginal::Laplace { loc, scale } => {
                let lb = lambda * scale;
                if lb.abs() >= 1.0 {
                    return None;
                }
                lambda * loc - (1.0 - lb * lb).ln()
            }
            Marginal::Logistic { loc, scale } => {
                let ls = lambda * scale;
                if ls.abs() >= 1.0 {
                    return None;
                }
                let x = PI * ls;
                lambda * loc + (x / x.sin()).ln()
            }
            Marginal::StudentT { .. } => return None,
            Marginal::Bernoulli { p } => {
                // log(1 - p + p e^λ), stable for large |λ|
                if lambda > 0.0 {
                    lambda + ((1.0 - p) * (-lambda).exp() + p).ln()
                } else {
                    (1.0 - p + p * lambda.exp()).ln()
                }
            }
            Marginal::Poisson { lambda: mu } => mu * lambda.exp_m1(),
            Marginal::Exponential { rate, negated } => {
                let l = if *negated { -lambda } else { lambda };
                if l >= *rate {
                    return None;
                }
                -(1.0 - l / rate).ln()
            }
            Marginal::Mixture { contaminant_weight: w, base, contaminant } => {
                let a = base.log_mgf(lambda)?;
                let b = contaminant.log_mgf(lambda)?;
                if *w == 0.0 {
                    a
                } else if *w == 1.0 {
                    b
                } else {
                    let la = (1.0 - w).ln() + a;
                    let lb = w.ln() + b;
                    let m = la.max(lb);
                    m + ((la - m).exp() + (lb - m).exp()).ln()
                }
            }
        };
        v.is_finite().then_some(v)
    }

    /// `log E exp(λ(Y - EY))`.
    pub fn centered_log_mgf(&self, lambda: f64) -> Option<f64> {
        Some(self.log_mgf(lambda)? - lambda * self.mean())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sample_labeled(rng).0
    }

    /// Draws `Y` and reports whether a mixture picked its contaminant component.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, bool) {
        let y = match self {
            Marginal::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Marginal::Laplace { loc, scale } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                loc - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            Marginal::Logistic { loc, scale } => {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                loc + scale * (u / (1.0 - u)).ln()
            }
            Marginal::StudentT { loc, scale, df } => {
                let t: f64 = StudentTSampler::new(*df).expect("valid df").sample(rng);
                loc + scale * t
            }
            Marginal::Bernoulli { p } => {
                if rng.random::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            Marginal::Poisson { lambda } => PoissonSampler::new(*lambda).expect("valid rate").sample(rng),
            Marginal::Exponential { rate, negated } => {
                let x: f64 = Exp::new(*rate).expect("valid rate").sample(rng);
                if *negated {
                    -x
                } else {
                    x
                }
            }
            Marginal::Mixture { contaminant_weight, base, contaminant } => {
                return if rng.random::<f64>() < *contaminant_weight {
                    (contaminant.sample(rng), true)
                } else {
                    (base.sample(rng), false)
                };
            }
        };
        (y, false)
    }

    /// Same law moved by `shift`.
    pub fn shifted(&self, shift: f64) -> Option<Marginal> {
        Some(match self {
            Marginal::Normal { mean, sd } => Marginal::Normal { mean: mean + shift, sd: *sd },
            Marginal::Laplace { loc, scale } => Marginal::Laplace { loc: loc + shift, scale: *scale },
            Marginal::Logistic { loc, scale } => Marginal::Logistic { loc: loc + shift, scale: *scale },
            Marginal::StudentT { loc, scale, df } => Marginal::StudentT { loc: loc + shift, scale: *scale, df: *df },
            Marginal::Mixture { contaminant_weight, base, contaminant } => Marginal::Mixture {
                contaminant_weight: *contaminant_weight,
                base: Box::new(base.shifted(shift)?),
                contaminant: Box::new(contaminant.shifted(shift)?),
            },
            _ => return None,
        })
    }
}

fn sign(negated: bool) -> f64 {
    if negated {
        -1.0
    } else {
        1.0
    }
}

fn student(df: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, df).expect("valid degrees of freedom")
}

fn raw_from_central(mean: f64, c: &[f64; 5]) -> [f64; 5] {
    let m = mean;
    [1.0, m, c[2] + m * m, c[3] + 3.0 * m * c[2] + m.powi(3), c[4] + 4.0 * m * c[3] + 6.0 * m * m * c[2] + m.powi(4)]
}

fn central_from_raw(r: &[f64; 5]) -> [f64; 5] {
    let m = r[1];
    [
        1.0,
        0.0,
        r[2] - m * m,
        r[3] - 3.0 * m * r[2] + 2.0 * m.powi(3),
        r[4] - 4.0 * m * r[3] + 6.0 * m * m * r[2] - 3.0 * m.powi(4),
    ]
}
