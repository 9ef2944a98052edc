//! Model classes: smooth i.i.d. families, canonical GLMs and LAD regression.
//!
//! A [`Model`] couples a per-observation quasi-log-density with the true
//! law of every response. Everything here is immutable after construction.

mod design;
mod glm;
mod iid;
mod kde;
mod marginal;
mod truth;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::linalg::LinalgError;
use crate::rng::{stream_rng, StreamTag};

pub use design::Design;
pub use glm::{glm_cumulant, GlmKind, EXPONENTIAL_DOMAIN_FLOOR};
pub use iid::IidFamily;
pub use kde::KernelDensity;
pub use marginal::Marginal;
pub use truth::{resolve_marginals, Link, MeanSpec, NoiseLaw, TruthSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("design is rank deficient (Gram eigenvalue ratio {rank_ratio:e})")]
    RankDeficient { rank_ratio: f64 },
    #[error("parameter outside the model domain: {0}")]
    Domain(String),
    #[error("no density for the law of observation {index} and oracle sampling is disabled")]
    DensityUnavailable { index: usize },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Density source for one LAD response.
#[derive(Debug, Clone)]
pub enum ResponseDensity {
    Analytic,
    Kernel(Arc<KernelDensity>),
}

#[derive(Debug, Clone)]
pub enum ModelClass {
    Iid { family: IidFamily },
    Glm { kind: GlmKind, scales: Vec<f64> },
    Lad { densities: Vec<ResponseDensity> },
}

/// Oracle sample used when an expectation has no closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleOptions {
    /// Number of draws; `None` forbids the Monte Carlo fallback.
    pub draws: Option<usize>,
    pub seed: u64,
}

pub const DEFAULT_ORACLE_SEED: u64 = 0x5e_ed0f_0a2c;

impl OracleOptions {
    /// 10^6 draws, used for i.i.d. expectations.
    pub fn expectation_default() -> Self {
        Self { draws: Some(1_000_000), seed: DEFAULT_ORACLE_SEED }
    }

    /// 10^5 draws, used for kernel density estimates.
    pub fn density_default() -> Self {
        Self { draws: Some(100_000), seed: DEFAULT_ORACLE_SEED }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    class: ModelClass,
    design: Option<Design>,
    n: usize,
    p: usize,
    truth: TruthSpec,
    marginals: Vec<Marginal>,
    oracle: Option<Arc<Vec<f64>>>,
}

fn index_of(theta: &DVector<f64>, design: &Design) -> DVector<f64> {
    design.index(theta)
}

impl Model {
    /// Canonical GLM `l(y, theta) = y Psi^T theta - d(Psi^T theta)`.
    ///
    /// `scales` are the exponential-moment scales `S_i`; by default the
    /// standard deviation of each response under the truth.
    pub fn glm(design: Design, kind: GlmKind, truth: TruthSpec, scales: Option<Vec<f64>>) -> Result<Self, ModelError> {
        let n = design.n();
        let p = design.p();
        let marginals = resolve_marginals(&truth, n, Some(&design), &|theta| {
            check_len(theta, p, "truth.theta")?;
            design.index(theta).iter().map(|&w| kind.in_family_law(w)).collect()
        })?;
        let scales = match scales {
            Some(s) => {
                if s.len() != n {
                    return Err(ModelError::InvalidSpec(format!("scales has {} entries, expected n = {n}", s.len())));
                }
                s
            }
            None => marginals.iter().map(Marginal::sd).collect(),
        };
        if let Some(i) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ModelError::InvalidSpec(format!("scale S_{i} = {} must be finite and positive", scales[i])));
        }
        Ok(Self { class: ModelClass::Glm { kind, scales }, design: Some(design), n, p, truth, marginals, oracle: None })
    }

    /// Median regression `l(y, theta) = -|y - Psi^T theta| / 2`.
    ///
    /// An in-family truth means Laplace(0, 1) residuals around `Psi^T theta`.
    /// Laws without a density get a kernel estimate from `oracle.draws`
    /// draws; with `oracle.draws = None` they are rejected.
    pub fn lad(design: Design, truth: TruthSpec, oracle: OracleOptions) -> Result<Self, ModelError> {
        let n = design.n();
        let p = design.p();
        let marginals = resolve_marginals(&truth, n, Some(&design), &|theta| {
            check_len(theta, p, "truth.theta")?;
            Ok(design.index(theta).iter().map(|&w| Marginal::Laplace { loc: w, scale: 1.0 }).collect())
        })?;
        let mut cache: Vec<(Marginal, Arc<KernelDensity>)> = Vec::new();
        let mut densities = Vec::with_capacity(n);
        for (i, law) in marginals.iter().enumerate() {
            if law.density(law.mean()).is_some() {
                densities.push(ResponseDensity::Analytic);
                continue;
            }
            let draws = oracle.draws.ok_or(ModelError::DensityUnavailable { index: i })?;
            let table = match cache.iter().find(|(m, _)| m == law) {
                Some((_, t)) => t.clone(),
                None => {
                    let mut rng = stream_rng(oracle.seed, cache.len() as u64, StreamTag::Oracle);
                    let sample: Vec<f64> = (0..draws).map(|_| law.sample(&mut rng)).collect();
                    let t = Arc::new(KernelDensity::silverman(&sample)?);
                    cache.push((law.clone(), t.clone()));
                    t
                }
            };
            densities.push(ResponseDensity::Kernel(table));
        }
        Ok(Self { class: ModelClass::Lad { densities }, design: Some(design), n, p, truth, marginals, oracle: None })
    }

    /// `n` i.i.d. observations from a smooth one-sample family.
    pub fn iid(family: IidFamily, n: usize, truth: TruthSpec, oracle: OracleOptions) -> Result<Self, ModelError> {
        if n == 0 {
            return Err(ModelError::InvalidSpec("n must be positive".into()));
        }
        let p = family.dim();
        let marginals = resolve_marginals(&truth, n, None, &|theta| {
            check_len(theta, p, "truth.theta")?;
            Ok(vec![family.law(theta); n])
        })?;
        if marginals.iter().any(|m| m != &marginals[0]) {
            return Err(ModelError::InvalidSpec("i.i.d. models need the same law for every observation".into()));
        }
        marginals[0].validate().map_err(ModelError::InvalidSpec)?;
        let needs_oracle = family.needs_oracle() || family.closed_form_target(&marginals[0]).is_none();
        let oracle = if needs_oracle {
            let draws = oracle.draws.ok_or_else(|| {
                ModelError::InvalidSpec(format!("{} under this truth needs an oracle sample", family.name()))
            })?;
            let mut rng = stream_rng(oracle.seed, 0, StreamTag::Oracle);
            Some(Arc::new((0..draws).map(|_| marginals[0].sample(&mut rng)).collect()))
        } else {
            None
        };
        Ok(Self { class: ModelClass::Iid { family }, design: None, n, p, truth, marginals, oracle })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn class(&self) -> &ModelClass {
        &self.class
    }

    pub fn design(&self) -> Option<&Design> {
        self.design.as_ref()
    }

    pub fn truth(&self) -> &TruthSpec {
        &self.truth
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn glm_kind(&self) -> Option<GlmKind> {
        match &self.class {
            ModelClass::Glm { kind, .. } => Some(*kind),
            _ => None,
        }
    }

    pub fn scales(&self) -> Option<&[f64]> {
        match &self.class {
            ModelClass::Glm { scales, .. } => Some(scales),
            _ => None,
        }
    }

    pub fn iid_family(&self) -> Option<IidFamily> {
        match &self.class {
            ModelClass::Iid { family } => Some(*family),
            _ => None,
        }
    }

    pub fn is_lad(&self) -> bool {
        matches!(self.class, ModelClass::Lad { .. })
    }

    /// Oracle sample behind Monte Carlo expectations, if the model uses one.
    pub fn oracle_sample(&self) -> Option<&[f64]> {
        self.oracle.as_deref().map(Vec::as_slice)
    }

    /// Short class label for reports.
    pub fn label(&self) -> String {
        match &self.class {
            ModelClass::Iid { family } => format!("iid/{}", family.name()),
            ModelClass::Glm { kind, .. } => format!("glm/{}", kind.name()),
            ModelClass::Lad { .. } => "lad".into(),
        }
    }

    fn design_ref(&self) -> &Design {
        self.design.as_ref().expect("regression models carry a design")
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<(), ModelError> {
        check_len(theta, self.p, "theta")?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Domain("theta has non-finite entries".into()));
        }
        Ok(())
    }

    /// Fails when `theta` leaves the parameter set (exponential GLM: some
    /// `Psi_i^T theta <= 1e-8`).
    pub fn check_domain(&self, theta: &DVector<f64>) -> Result<(), ModelError> {
        self.check_theta(theta)?;
        if let ModelClass::Glm { kind, .. } = &self.class {
            if *kind == GlmKind::Exponential {
                let w = index_of(theta, self.design_ref());
                if let Some(i) = w.iter().position(|&v| !kind.admits(v)) {
                    return Err(ModelError::Domain(format!(
                        "Psi_{i}^T theta = {} is not above {EXPONENTIAL_DOMAIN_FLOOR}",
                        w[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn in_domain(&self, theta: &DVector<f64>) -> bool {
        self.check_domain(theta).is_ok()
    }

    fn check_data(&self, y: &[f64]) -> Result<(), ModelError> {
        if y.len() != self.n {
            return Err(ModelError::InvalidSpec(format!("data has {} entries, expected n = {}", y.len(), self.n)));
        }
        Ok(())
    }

    /// `l(y_i, theta)` for observation `i`.
    pub fn obs_loglik(&self, i: usize, y: f64, theta: &DVector<f64>) -> Result<f64, ModelError> {
        self.check_domain(theta)?;
        Ok(match &self.class {
            ModelClass::Iid { family } => family.loglik(y, theta),
            ModelClass::Glm { kind, .. } => {
                let w = self.design_ref().row(i).dot(theta);
                y * w - glm_cumulant(*kind, w)?.0
            }
            ModelClass::Lad { .. } => -0.5 * (y - self.design_ref().row(i).dot(theta)).abs(),
        })
    }

    pub fn obs_gradient(&self, i: usize, y: f64, theta: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check_domain(theta)?;
        Ok(match &self.class {
            ModelClass::Iid { family } => family.gradient(y, theta),
            ModelClass::Glm { kind, .. } => {
                let psi = self.design_ref().row(i);
                let (_, d1, _) = glm_cumulant(*kind, psi.dot(theta))?;
                psi * (y - d1)
            }
            ModelClass::Lad { .. } => {
                let psi = self.design_ref().row(i);
                let r = y - psi.dot(theta);
                psi * (0.5 * sign0(r))
            }
        })
    }

    pub fn obs_hessian(&self, i: usize, y: f64, theta: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        self.check_domain(theta)?;
        Ok(match &self.class {
            ModelClass::Iid { family } => family.hessian(y, theta),
            ModelClass::Glm { kind, .. } => {
                let psi = self.design_ref().row(i);
                let (_, _, d2) = glm_cumulant(*kind, psi.dot(theta))?;
                &psi * psi.transpose() * (-d2)
            }
            ModelClass::Lad { .. } => DMatrix::zeros(self.p, self.p),
        })
    }

    /// `L(theta) = sum_i l(Y_i, theta)`.
    pub fn loglik(&self, y: &[f64], theta: &DVector<f64>) -> Result<f64, ModelError> {
        self.check_data(y)?;
        self.check_domain(theta)?;
        match &self.class {
            ModelClass::Iid { family } => Ok(y.iter().map(|&v| family.loglik(v, theta)).sum()),
            ModelClass::Glm { kind, .. } => {
                let w = index_of(theta, self.design_ref());
                let mut s = 0.0;
                for (yi, wi) in y.iter().zip(w.iter()) {
                    s += yi * wi - glm_cumulant(*kind, *wi)?.0;
                }
                Ok(s)
            }
            ModelClass::Lad { .. } => {
                let w = index_of(theta, self.design_ref());
                Ok(-0.5 * y.iter().zip(w.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>())
            }
        }
    }

    pub fn gradient(&self, y: &[f64], theta: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check_data(y)?;
        self.check_domain(theta)?;
        match &self.class {
            ModelClass::Iid { family } => {
                Ok(y.iter().fold(DVector::zeros(self.p), |acc, &v| acc + family.gradient(v, theta)))
            }
            ModelClass::Glm { kind, .. } => {
                let d = self.design_ref();
                let w = index_of(theta, d);
                let mut c = DVector::zeros(self.n);
                for i in 0..self.n {
                    c[i] = y[i] - glm_cumulant(*kind, w[i])?.1;
                }
                Ok(d.weighted_sum(c.as_view()))
            }
            ModelClass::Lad { .. } => {
                let d = self.design_ref();
                let w = index_of(theta, d);
                let c = DVector::from_fn(self.n, |i, _| 0.5 * sign0(y[i] - w[i]));
                Ok(d.weighted_sum(c.as_view()))
            }
        }
    }

    /// Hessian of `L`; identically zero for LAD away from the kinks.
    pub fn hessian(&self, y: &[f64], theta: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        self.check_data(y)?;
        self.check_domain(theta)?;
        match &self.class {
            ModelClass::Iid { family } => {
                Ok(y.iter().fold(DMatrix::zeros(self.p, self.p), |acc, &v| acc + family.hessian(v, theta)))
            }
            ModelClass::Glm { kind, .. } => {
                let d = self.design_ref();
                let w = index_of(theta, d);
                let c = w.iter().map(|&wi| glm_cumulant(*kind, wi).map(|t| -t.2)).collect::<Result<Vec<_>, _>>()?;
                Ok(d.weighted_gram(&c))
            }
            ModelClass::Lad { .. } => Ok(DMatrix::zeros(self.p, self.p)),
        }
    }

    /// `E L(theta)` under the truth.
    pub fn expected_loglik(&self, theta: &DVector<f64>) -> Result<f64, ModelError> {
        self.check_domain(theta)?;
        match &self.class {
            ModelClass::Iid { family } => match family.expected(&self.marginals[0], theta) {
                Some((el, _, _)) if self.oracle.is_none() => Ok(self.n as f64 * el),
                _ => Ok(self.n as f64 * self.oracle_mean(|y| family.loglik(y, theta))),
            },
            ModelClass::Glm { kind, .. } => {
                let w = index_of(theta, self.design_ref());
                let mut s = 0.0;
                for (law, wi) in self.marginals.iter().zip(w.iter()) {
                    s += law.mean() * wi - glm_cumulant(*kind, *wi)?.0;
                }
                Ok(s)
            }
            ModelClass::Lad { .. } => {
                let w = index_of(theta, self.design_ref());
                Ok(-0.5 * self.marginals.iter().zip(w.iter()).map(|(law, wi)| law.mean_abs_dev(*wi)).sum::<f64>())
            }
        }
    }

    /// `E L(theta) - E L(theta_ref)`.
    pub fn expected_excess(&self, theta: &DVector<f64>, theta_ref: &DVector<f64>) -> Result<f64, ModelError> {
        Ok(self.expected_loglik(theta)? - self.expected_loglik(theta_ref)?)
    }

    /// `grad E L(theta)`.
    pub fn expected_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check_domain(theta)?;
        match &self.class {
            ModelClass::Iid { family } => match family.expected(&self.marginals[0], theta) {
                Some((_, g, _)) if self.oracle.is_none() => Ok(g * self.n as f64),
                _ => Ok(self.oracle_mean_vec(|y| family.gradient(y, theta)) * self.n as f64),
            },
            ModelClass::Glm { kind, .. } => {
                let d = self.design_ref();
                let w = index_of(theta, d);
                let mut c = DVector::zeros(self.n);
                for i in 0..self.n {
                    c[i] = self.marginals[i].mean() - glm_cumulant(*kind, w[i])?.1;
                }
                Ok(d.weighted_sum(c.as_view()))
            }
            ModelClass::Lad { .. } => {
                let d = self.design_ref();
                let w = index_of(theta, d);
                let c = DVector::from_fn(self.n, |i, _| 0.5 - self.marginals[i].cdf(w[i]));
                Ok(d.weighted_sum(c.as_view()))
            }
        }
    }

    /// `-hess E L(theta)`. For LAD this is `sum_i p_i(Psi_i^T theta) Psi_i Psi_i^T`
    /// with `p_i` the response density.
    pub fn expected_neg_hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        self.check_domain(theta)?;
        match &self.class {
            ModelClass::Iid { family } => match family.expected(&self.marginals[0], theta) {
                Some((_, _, h)) if self.oracle.is_none() => Ok(h * self.n as f64),
                _ => Ok(self.oracle_mean_mat(|y| -family.hessian(y, theta)) * self.n as f64),
            },
            ModelClass::Glm { kind, .. } => {
                let d = self.design_ref();
                let w = index_of(theta, d);
                let c = w.iter().map(|&wi| glm_cumulant(*kind, wi).map(|t| t.2)).collect::<Result<Vec<_>, _>>()?;
                Ok(d.weighted_gram(&c))
            }
            ModelClass::Lad { .. } => {
                let d = self.design_ref();
                let w = index_of(theta, d);
                let c: Vec<f64> = (0..self.n).map(|i| self.response_density(i, w[i])).collect();
                Ok(d.weighted_gram(&c))
            }
        }
    }

    /// `grad zeta(theta) = grad L(theta) - grad E L(theta)`.
    pub fn stochastic_gradient(&self, y: &[f64], theta: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(self.gradient(y, theta)? - self.expected_gradient(theta)?)
    }

    /// Density of `Y_i` at `y`; kernel estimate where the law has atoms.
    /// Meaningful for LAD models and continuous laws.
    pub fn response_density(&self, i: usize, y: f64) -> f64 {
        if let ModelClass::Lad { densities } = &self.class {
            if let ResponseDensity::Kernel(k) = &densities[i] {
                return k.eval(y);
            }
        }
        self.marginals[i].density(y).unwrap_or(f64::NAN)
    }

    pub fn response_cdf(&self, i: usize, y: f64) -> f64 {
        self.marginals[i].cdf(y)
    }

    /// `b_i(theta) = P(Y_i <= Psi_i^T theta)` (LAD).
    pub fn lad_b(&self, i: usize, theta: &DVector<f64>) -> f64 {
        let w = self.design_ref().row(i).dot(theta);
        self.marginals[i].cdf(w)
    }

    /// Mean over the oracle sample.
    pub fn oracle_mean(&self, f: impl Fn(f64) -> f64) -> f64 {
        let s = self.oracle.as_ref().expect("model has an oracle sample");
        s.iter().map(|&y| f(y)).sum::<f64>() / s.len() as f64
    }

    fn oracle_mean_vec(&self, f: impl Fn(f64) -> DVector<f64>) -> DVector<f64> {
        let s = self.oracle.as_ref().expect("model has an oracle sample");
        s.iter().fold(DVector::zeros(self.p), |acc, &y| acc + f(y)) / s.len() as f64
    }

    fn oracle_mean_mat(&self, f: impl Fn(f64) -> DMatrix<f64>) -> DMatrix<f64> {
        let s = self.oracle.as_ref().expect("model has an oracle sample");
        s.iter().fold(DMatrix::zeros(self.p, self.p), |acc, &y| acc + f(y)) / s.len() as f64
    }

    /// Responses `Y_1..Y_n`; a pure function of `seed`.
    pub fn sample_data(&self, seed: u64) -> Vec<f64> {
        self.sample_with(&mut stream_rng(seed, 0, StreamTag::Data))
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.marginals.iter().map(|m| m.sample(rng)).collect()
    }

    /// Responses plus a flag per observation marking contaminant draws.
    pub fn sample_labeled(&self, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = stream_rng(seed, 0, StreamTag::Data);
        self.marginals.iter().map(|m| m.sample_labeled(&mut rng)).unzip()
    }

    /// Same model with every design entry multiplied by `c`; the truth is kept.
    pub fn with_scaled_design(&self, c: f64) -> Result<Self, ModelError> {
        let design = self.design_ref().scaled(c)?;
        Ok(Self { design: Some(design), ..self.clone() })
    }
}

fn sign0(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_len(theta: &DVector<f64>, p: usize, what: &str) -> Result<(), ModelError> {
    if theta.len() != p {
        return Err(ModelError::InvalidSpec(format!("{what} has {} entries, expected p = {p}", theta.len())));
    }
    Ok(())
}
