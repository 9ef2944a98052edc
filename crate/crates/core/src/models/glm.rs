//! Canonical exponential families: cumulant `d(w)` and its derivatives.

use serde::{Deserialize, Serialize};

use super::marginal::Marginal;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmKind {
    Logistic,
    Poisson,
    Exponential,
    Gaussian,
}

/// Smallest natural parameter accepted by the exponential kind.
pub const EXPONENTIAL_DOMAIN_FLOOR: f64 = 1e-8;

/// `(d(w), d'(w), d''(w))` for the canonical parametrisation of `kind`.
pub fn glm_cumulant(kind: GlmKind, w: f64) -> Result<(f64, f64, f64), ModelError> {
    if !w.is_finite() {
        return Err(ModelError::Domain(format!("non-finite natural parameter {w}")));
    }
    Ok(match kind {
        GlmKind::Gaussian => (0.5 * w * w, w, 1.0),
        GlmKind::Poisson => {
            let e = w.exp();
            (e, e, e)
        }
        GlmKind::Logistic => {
            // softplus and logistic function, both stable in either tail
            let d = w.max(0.0) + (-w.abs()).exp().ln_1p();
            let s = if w >= 0.0 {
                1.0 / (1.0 + (-w).exp())
            } else {
                let e = w.exp();
                e / (1.0 + e)
            };
            (d, s, s * (1.0 - s))
        }
        GlmKind::Exponential => {
            if w <= 0.0 {
                return Err(ModelError::Domain(format!("exponential cumulant -log(w) undefined at w = {w}")));
            }
            (-w.ln(), -1.0 / w, 1.0 / (w * w))
        }
    })
}

impl GlmKind {
    /// Response law when the model is correctly specified at natural parameter `w`.
    pub fn in_family_law(self, w: f64) -> Result<Marginal, ModelError> {
        let (_, mean, _) = glm_cumulant(self, w)?;
        Ok(match self {
            GlmKind::Gaussian => Marginal::Normal { mean, sd: 1.0 },
            GlmKind::Poisson => Marginal::Poisson { lambda: mean },
            GlmKind::Logistic => Marginal::Bernoulli { p: mean },
            GlmKind::Exponential => Marginal::Exponential { rate: w, negated: true },
        })
    }

    /// Whether `w` lies where the cumulant is evaluated.
    pub fn admits(self, w: f64) -> bool {
        match self {
            GlmKind::Exponential => w > EXPONENTIAL_DOMAIN_FLOOR,
            _ => w.is_finite(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GlmKind::Logistic => "logistic",
            GlmKind::Poisson => "poisson",
            GlmKind::Exponential => "exponential",
            GlmKind::Gaussian => "gaussian",
        }
    }
}
