//! Data-generating laws, possibly outside the fitted family.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::design::Design;
use super::marginal::Marginal;
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthSpec {
    /// Responses drawn from the fitted family at `theta`.
    InFamily { theta: Vec<f64> },
    /// `E Y_i = f_i` with the residual law `noise`.
    CustomMean { mean: MeanSpec, noise: NoiseLaw },
    /// Each response is replaced, with probability `fraction`, by a draw
    /// from `contaminant`.
    Contaminated { base: Box<TruthSpec>, fraction: f64, contaminant: Marginal },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    Logistic,
    Exp,
}

impl Link {
    fn apply(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logistic => 1.0 / (1.0 + (-eta).exp()),
            Link::Exp => eta.exp(),
        }
    }
}

/// Per-observation mean `f_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum MeanSpec {
    Values {
        values: Vec<f64>,
    },
    Constant {
        value: f64,
    },
    /// `f_i = link(eta_i + curvature * eta_i^2)` with `eta_i = Psi_i^T theta`.
    Index {
        theta: Vec<f64>,
        #[serde(default)]
        curvature: f64,
        #[serde(default)]
        link: Link,
    },
}

/// Residual law around `f_i`. For `Bernoulli` and `Poisson`, `f_i` is the
/// success probability or rate itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum NoiseLaw {
    Normal { sd: f64 },
    Laplace { scale: f64 },
    StudentT { df: f64, scale: f64 },
    Logistic { scale: f64 },
    Bernoulli,
    Poisson,
}

impl NoiseLaw {
    pub fn around(&self, f: f64) -> Result<Marginal, ModelError> {
        let law = match *self {
            NoiseLaw::Normal { sd } => Marginal::Normal { mean: f, sd },
            NoiseLaw::Laplace { scale } => Marginal::Laplace { loc: f, scale },
            NoiseLaw::StudentT { df, scale } => Marginal::StudentT { loc: f, scale, df },
            NoiseLaw::Logistic { scale } => Marginal::Logistic { loc: f, scale },
            NoiseLaw::Bernoulli => Marginal::Bernoulli { p: f },
            NoiseLaw::Poisson => Marginal::Poisson { lambda: f },
        };
        law.validate().map_err(ModelError::InvalidSpec)?;
        Ok(law)
    }
}

impl MeanSpec {
    pub fn values(&self, n: usize, design: Option<&Design>) -> Result<Vec<f64>, ModelError> {
        match self {
            MeanSpec::Values { values } => {
                if values.len() != n {
                    return Err(ModelError::InvalidSpec(format!(
                        "mean.values has {} entries, expected n = {n}",
                        values.len()
                    )));
                }
                Ok(values.clone())
            }
            MeanSpec::Constant { value } => Ok(vec![*value; n]),
            MeanSpec::Index { theta, curvature, link } => {
                let design =
                    design.ok_or_else(|| ModelError::InvalidSpec("mean.form = index needs a design".into()))?;
                if theta.len() != design.p() {
                    return Err(ModelError::InvalidSpec(format!(
                        "mean.theta has {} entries, expected p = {}",
                        theta.len(),
                        design.p()
                    )));
                }
                let eta = design.index(&DVector::from_column_slice(theta));
                Ok(eta.iter().map(|&e| link.apply(e + curvature * e * e)).collect())
            }
        }
    }
}

type FamilyLaws<'a> = dyn Fn(&DVector<f64>) -> Result<Vec<Marginal>, ModelError> + 'a;

/// Resolves a truth into one law per observation. `in_family` maps a
/// parameter vector to the fitted family's laws.
pub fn resolve_marginals(
    truth: &TruthSpec,
    n: usize,
    design: Option<&Design>,
    in_family: &FamilyLaws<'_>,
) -> Result<Vec<Marginal>, ModelError> {
    match truth {
        TruthSpec::InFamily { theta } => {
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidSpec("truth.theta has non-finite entries".into()));
            }
            in_family(&DVector::from_column_slice(theta))
        }
        TruthSpec::CustomMean { mean, noise } => mean.values(n, design)?.into_iter().map(|f| noise.around(f)).collect(),
        TruthSpec::Contaminated { base, fraction, contaminant } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(ModelError::InvalidSpec(format!("contamination fraction {fraction} outside [0, 1]")));
            }
            contaminant.validate().map_err(ModelError::InvalidSpec)?;
            let laws = resolve_marginals(base, n, design, in_family)?;
            Ok(laws
                .into_iter()
                .map(|b| Marginal::Mixture {
                    contaminant_weight: *fraction,
                    base: Box::new(b),
                    contaminant: Box::new(contaminant.clone()),
                })
                .collect())
        }
    }
}

impl TruthSpec {
    /// The parameter of an in-family truth.
    pub fn in_family_theta(&self) -> Option<DVector<f64>> {
        match self {
            TruthSpec::InFamily { theta } => Some(DVector::from_column_slice(theta)),
            _ => None,
        }
    }
}
