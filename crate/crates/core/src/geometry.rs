//! Local geometry around the target `theta*`: information matrices, the
//! normalized score, spectral statistics of `B = D^{-1} V^2 D^{-1}`, local
//! moduli `delta(r)`, `rho(r)`, the global drift `b(r)` and the
//! exponential-moment constants `(nu, g)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{quasi_random_directions, solve_spd, symmetric_operator_norm, LinalgError, Spd};
use crate::models::{Design, GlmKind, Model, ModelClass, ModelError};
use crate::rng::{stream_rng, StreamTag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("information matrix D^2 is singular (min/max eigenvalue ratio {ratio:e})")]
    SingularInformation { ratio: f64 },
    #[error("target search diverged ({reason}); last iterate {last_iterate:?}")]
    TargetDiverged { reason: String, last_iterate: Vec<f64> },
    #[error("tail constants undefined: {0}")]
    TailUndefined(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `mu_c` in the quadratic-form tail.
pub const MU_C: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMethod {
    InFamily,
    Newton,
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub theta: Vec<f64>,
    pub method: TargetMethod,
    /// Largest coordinate standard error, Monte Carlo targets only.
    pub standard_error: Option<f64>,
    /// `|grad E L(theta*)|` as evaluated by the model.
    pub stationarity: f64,
}

impl Target {
    pub fn vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }
}

/// `theta* = argmax E L(theta)`.
pub fn compute_target(model: &Model) -> Result<Target, GeometryError> {
    let p = model.p();
    if let Some(theta) = model.truth().in_family_theta() {
        let stationarity = model.expected_gradient(&theta)?.norm();
        return Ok(Target {
            theta: theta.iter().copied().collect(),
            method: TargetMethod::InFamily,
            standard_error: None,
            stationarity,
        });
    }
    match model.class() {
        ModelClass::Iid { family } => {
            let law = &model.marginals()[0];
            if model.oracle_sample().is_none() {
                let theta = family.closed_form_target(law).ok_or_else(|| GeometryError::TargetDiverged {
                    reason: "no closed-form target for this truth".into(),
                    last_iterate: vec![],
                })?;
                let stationarity = model.expected_gradient(&theta)?.norm();
                return Ok(Target {
                    theta: theta.iter().copied().collect(),
                    method: TargetMethod::ClosedForm,
                    standard_error: None,
                    stationarity,
                });
            }
            let sample = model.oracle_sample().expect("checked above");
            let start = family.moment_start(&sample[..sample.len().min(100_000)]);
            let theta = maximise_expected(model, start)?;
            let m = sample.len() as f64;
            let mean_g = DVector::from_fn(p, |_, _| 0.0);
            let (mut sum, mut sum2) = (mean_g.clone(), DMatrix::zeros(p, p));
            for &y in sample {
                let g = family.gradient(y, &theta);
                sum2 += &g * g.transpose();
                sum += g;
            }
            let cov = sum2 / m - (&sum / m) * (&sum / m).transpose();
            let f = model.expected_neg_hessian(&theta)? / model.n() as f64;
            let finv = f.try_inverse().ok_or(GeometryError::SingularInformation { ratio: 0.0 })?;
            let var = &finv * cov * &finv / m;
            let se = var.diagonal().iter().fold(0.0f64, |a, v| a.max(v.max(0.0).sqrt()));
            let stationarity = model.expected_gradient(&theta)?.norm();
            Ok(Target {
                theta: theta.iter().copied().collect(),
                method: TargetMethod::MonteCarlo,
                standard_error: Some(se),
                stationarity,
            })
        }
        ModelClass::Glm { kind, .. } => {
            let design = model.design().expect("GLM has a design");
            let start = glm_target_start(model, *kind, design);
            let theta = maximise_expected(model, start)?;
            let stationarity = model.expected_gradient(&theta)?.norm();
            Ok(Target {
                theta: theta.iter().copied().collect(),
                method: TargetMethod::Newton,
                standard_error: None,
                stationarity,
            })
        }
        ModelClass::Lad { .. } => {
            let design = model.design().expect("LAD has a design");
            let means = DVector::from_fn(model.n(), |i, _| {
                let m = model.marginals()[i].mean();
                if m.is_finite() {
                    m
                } else {
                    0.0
                }
            });
            let start =
                solve_spd(&design.gram(), &design.weighted_sum(means.as_view())).unwrap_or_else(|| DVector::zeros(p));
            let theta = maximise_expected(model, start)?;
            let stationarity = model.expected_gradient(&theta)?.norm();
            Ok(Target {
                theta: theta.iter().copied().collect(),
                method: TargetMethod::Newton,
                standard_error: None,
                stationarity,
            })
        }
    }
}

fn glm_target_start(model: &Model, kind: GlmKind, design: &Design) -> DVector<f64> {
    let zero = DVector::zeros(model.p());
    if kind != GlmKind::Exponential {
        return zero;
    }
    let fbar = model.marginals().iter().map(|m| m.mean()).sum::<f64>() / model.n() as f64;
    let level = 1.0 / fbar.abs().max(1e-8);
    let rhs = design.weighted_sum(DVector::from_element(design.n(), level).as_view());
    solve_spd(&design.gram(), &rhs).unwrap_or(zero)
}

/// Newton ascent on `E L` with backtracking.
fn maximise_expected(model: &Model, start: DVector<f64>) -> Result<DVector<f64>, GeometryError> {
    let mut theta = start;
    let diverged = |reason: &str, t: &DVector<f64>| GeometryError::TargetDiverged {
        reason: reason.into(),
        last_iterate: t.iter().copied().collect(),
    };
    let mut el =
        model.expected_loglik(&theta).map_err(|e| diverged(&format!("start outside the domain: {e}"), &theta))?;
    let scale = model.n() as f64;
    for _ in 0..200 {
        let g = model.expected_gradient(&theta)?;
        if g.norm() <= 1e-11 * scale.max(1.0) {
            return Ok(theta);
        }
        let h = model.expected_neg_hessian(&theta)?;
        let step = match solve_spd(&h, &g) {
            Some(s) if s.dot(&g) > 0.0 && s.iter().all(|v| v.is_finite()) => s,
            _ => g.clone(),
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &theta + &step * t;
            if model.in_domain(&cand) {
                if let Ok(ec) = model.expected_loglik(&cand) {
                    // below the rounding level of E L, accept steps that shrink the gradient
                    let flat = ec >= el - 1e-13 * (1.0 + el.abs())
                        && model.expected_gradient(&cand).is_ok_and(|gc| gc.norm() < g.norm());
                    if ec >= el || flat {
                        let small = (&cand - &theta).amax() <= 1e-15 * (1.0 + theta.amax());
                        theta = cand;
                        el = ec;
                        moved = !small;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !moved {
            let g = model.expected_gradient(&theta)?;
            if g.norm() <= 1e-7 * scale.max(1.0) {
                return Ok(theta);
            }
            return Err(diverged("line search stalled", &theta));
        }
        if theta.iter().any(|v| !v.is_finite() || v.abs() > 1e8) {
            return Err(diverged("iterates diverge", &theta));
        }
    }
    let g = model.expected_gradient(&theta)?;
    if g.norm() <= 1e-7 * scale.max(1.0) {
        Ok(theta)
    } else {
        Err(diverged("iteration limit", &theta))
    }
}

/// `(D^2, V^2)` at `theta*`.
pub fn fisher_matrices(model: &Model, theta_star: &DVector<f64>) -> Result<(Spd, Spd), GeometryError> {
    let d2 = Spd::new(model.expected_neg_hessian(theta_star)?)?;
    if let Err(LinalgError::Singular { ratio }) = d2.ensure_nonsingular() {
        return Err(GeometryError::SingularInformation { ratio });
    }
    let v2 = match model.class() {
        ModelClass::Glm { scales, .. } => {
            let design = model.design().expect("GLM has a design");
            let s2: Vec<f64> = scales.iter().map(|s| s * s).collect();
            design.weighted_gram(&s2)
        }
        ModelClass::Lad { .. } => model.design().expect("LAD has a design").gram() * 0.25,
        ModelClass::Iid { family } => {
            let law = &model.marginals()[0];
            let per_obs = match family.score_covariance(law, theta_star) {
                Some(c) if model.oracle_sample().is_none() => c,
                _ => {
                    let sample = model.oracle_sample().ok_or_else(|| {
                        GeometryError::Model(ModelError::InvalidSpec("score covariance needs an oracle sample".into()))
                    })?;
                    empirical_covariance(sample.iter().map(|&y| family.gradient(y, theta_star)), model.p())
                }
            };
            per_obs * model.n() as f64
        }
    };
    Ok((d2, Spd::new(v2)?))
}

fn empirical_covariance(items: impl Iterator<Item = DVector<f64>>, p: usize) -> DMatrix<f64> {
    let mut sum = DVector::zeros(p);
    let mut sum2 = DMatrix::zeros(p, p);
    let mut m = 0.0;
    for g in items {
        sum2 += &g * g.transpose();
        sum += g;
        m += 1.0;
    }
    let mean = sum / m;
    let c = sum2 / m - &mean * mean.transpose();
    (&c + c.transpose()) * 0.5
}

/// `xi = D^{-1} grad L(theta*)`.
pub fn normalized_score(
    model: &Model,
    y: &[f64],
    theta_star: &DVector<f64>,
    d2: &Spd,
) -> Result<DVector<f64>, GeometryError> {
    let g = model.gradient(y, theta_star)?;
    Ok(d2.inv_sqrt()? * g)
}

/// Spectral statistics of `B` and the constants of the quadratic-form tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailParams {
    pub b: Spd,
    pub dim_a: f64,
    pub v_a2: f64,
    pub lambda0: f64,
    pub mu_c: f64,
    pub yc: f64,
    pub gc: f64,
    pub xc: f64,
    pub nu: f64,
    pub g: f64,
}

impl TailParams {
    pub fn v_a(&self) -> f64 {
        self.v_a2.sqrt()
    }
}

/// `B = D^{-1} V^2 D^{-1}`.
pub fn b_matrix(d2: &Spd, v2: &Spd) -> Result<Spd, GeometryError> {
    let dinv = d2.inv_sqrt()?;
    Ok(Spd::new(&dinv * v2.matrix() * &dinv)?)
}

pub fn spectral_stats(d2: &Spd, v2: &Spd, nu: f64, g: f64) -> Result<TailParams, GeometryError> {
    let b = b_matrix(d2, v2)?;
    let p = b.dim();
    let dim_a = b.trace();
    let b2 = b.matrix() * b.matrix();
    let v_a2 = 2.0 * b2.trace();
    let lambda0 = b.max_eigenvalue();
    if !(g * g >= 2.0 * dim_a) {
        return Err(GeometryError::TailUndefined(format!("g^2 = {} is below 2 dim_A = {}", g * g, 2.0 * dim_a)));
    }
    let yc2 = g * g / (MU_C * MU_C) - dim_a / MU_C;
    let gc = (g * g - MU_C * dim_a).sqrt();
    let arg = DMatrix::identity(p, p) - &b2 * (MU_C / lambda0);
    let eig = crate::linalg::symmetric_eigenvalues(&arg);
    if eig[0] <= 0.0 {
        return Err(GeometryError::TailUndefined(format!(
            "I - mu_c B^2 / lambda0 is not positive definite (min eigenvalue {})",
            eig[0]
        )));
    }
    let logdet: f64 = eig.iter().map(|v| v.ln()).sum();
    let xc = 0.5 * (MU_C * yc2 + logdet);
    Ok(TailParams { b, dim_a, v_a2, lambda0, mu_c: MU_C, yc: yc2.sqrt(), gc, xc, nu, g })
}

/// `a = sqrt(lambda_max(D^{-1} V^2 D^{-1}))`, the least `a` with `a^2 D^2 >= V^2`.
pub fn identifiability_constant(d2: &Spd, v2: &Spd) -> Result<f64, GeometryError> {
    Ok(b_matrix(d2, v2)?.max_eigenvalue().sqrt())
}

/// `N` from `N^{-1/2} = max_i S_i sqrt(Psi_i^T V^{-2} Psi_i)`.
pub fn glm_effective_n(design: &Design, scales: &[f64], v2: &Spd) -> Result<f64, GeometryError> {
    let vinv = v2.inverse()?;
    let mut worst = 0.0f64;
    for (i, s) in scales.iter().enumerate() {
        let psi = design.row(i);
        worst = worst.max(s * psi.dot(&(&vinv * &psi)).max(0.0).sqrt());
    }
    Ok(1.0 / (worst * worst))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryOptions {
    /// Probe directions per radius.
    pub directions: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub per_octave: usize,
    /// Largest standardized exponential-moment parameter tried when calibrating `g_1`.
    pub lambda_max: f64,
    /// Draws used for the i.i.d. `rho` probe.
    pub probe_draws: usize,
    pub probe_seed: u64,
    pub nu: Option<f64>,
    pub g1: Option<f64>,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        Self {
            directions: 64,
            radius_min: 1.0 / 32.0,
            radius_max: 1024.0,
            per_octave: 8,
            lambda_max: 50.0,
            probe_draws: 50_000,
            probe_seed: 0x9e0_7e7,
            nu: None,
            g1: None,
        }
    }
}

impl GeometryOptions {
    pub fn radius_grid(&self) -> Vec<f64> {
        let octaves = (self.radius_max / self.radius_min).log2();
        let steps = (octaves * self.per_octave as f64).round() as usize;
        (0..=steps).map(|k| self.radius_min * 2f64.powf(k as f64 / self.per_octave as f64)).collect()
    }
}

/// Tabulated `delta(r)`, `rho(r)` (running maxima over probe spheres) and the
/// drift constant `b(r)`. Lookups between grid radii step up to the next
/// grid radius; beyond the table they return infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuliTable {
    pub radii: Vec<f64>,
    pub delta: Vec<f64>,
    pub rho: Vec<f64>,
    pub b: Vec<f64>,
    pub iid_rates: Option<IidRates>,
}

/// Linear moduli of i.i.d. models: `delta(r) = delta* r / sqrt(n)`, same for `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IidRates {
    pub delta_star: f64,
    pub rho_star: f64,
    pub sqrt_n: f64,
}

impl ModuliTable {
    fn lookup(&self, values: &[f64], linear_rate: Option<f64>, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if let (Some(rate), Some(rates)) = (linear_rate, self.iid_rates.as_ref()) {
            return rate * r / rates.sqrt_n;
        }
        match self.radii.iter().position(|&g| g >= r * (1.0 - 1e-12)) {
            Some(k) => values[k],
            None => f64::INFINITY,
        }
    }

    pub fn delta_at(&self, r: f64) -> f64 {
        self.lookup(&self.delta, self.iid_rates.as_ref().map(|x| x.delta_star), r)
    }

    pub fn rho_at(&self, r: f64) -> f64 {
        self.lookup(&self.rho, self.iid_rates.as_ref().map(|x| x.rho_star), r)
    }

    /// `b(r)` at the grid radius just below `r` (conservative for a
    /// nonincreasing `b`).
    pub fn b_at(&self, r: f64) -> f64 {
        match self.radii.iter().rposition(|&g| g <= r * (1.0 + 1e-12)) {
            Some(k) => self.b[k],
            None => self.b.first().copied().unwrap_or(f64::NAN),
        }
    }

    /// Largest grid radius with `delta, rho <= 1/2`.
    pub fn admissible_radius(&self) -> Option<f64> {
        (0..self.radii.len()).filter(|&k| self.delta[k] <= 0.5 && self.rho[k] <= 0.5).map(|k| self.radii[k]).next_back()
    }
}

/// Probe point `theta* + r V^{-1} u`.
pub fn probe_point(theta_star: &DVector<f64>, v_inv: &DMatrix<f64>, r: f64, u: &DVector<f64>) -> DVector<f64> {
    theta_star + v_inv * u * r
}

/// `delta(r)`, `rho(r)` and `b(r)` on the option grid.
pub fn local_moduli(
    model: &Model,
    theta_star: &DVector<f64>,
    d2: &Spd,
    v2: &Spd,
    opts: &GeometryOptions,
) -> Result<ModuliTable, GeometryError> {
    let radii = opts.radius_grid();
    let dirs = quasi_random_directions(model.p(), opts.directions);
    let dinv = d2.inv_sqrt()?;
    let vinv = v2.inv_sqrt()?;
    let p = model.p();
    let id = DMatrix::<f64>::identity(p, p);
    let el_star = model.expected_loglik(theta_star)?;

    let b_star: Vec<f64> =
        if model.is_lad() { (0..model.n()).map(|i| model.lad_b(i, theta_star)).collect() } else { vec![] };

    let mut delta_raw = Vec::with_capacity(radii.len());
    let mut rho_raw = Vec::with_capacity(radii.len());
    let mut b = Vec::with_capacity(radii.len());
    for &r in &radii {
        let mut dmax = 0.0f64;
        let mut rmax = 0.0f64;
        let mut bmin = f64::INFINITY;
        for u in &dirs {
            let theta = probe_point(theta_star, &vinv, r, u);
            if !model.in_domain(&theta) {
                continue;
            }
            let h = model.expected_neg_hessian(&theta)?;
            let dev = &id - &dinv * h * &dinv;
            dmax = dmax.max(symmetric_operator_norm(&dev));
            let drop = el_star - model.expected_loglik(&theta)?;
            bmin = bmin.min(drop / (0.5 * r * r));
            if model.is_lad() {
                for (i, bs) in b_star.iter().enumerate() {
                    rmax = rmax.max(4.0 * (model.lad_b(i, &theta) - bs).abs());
                }
            }
        }
        // curvature deviations at the rounding level of D^2 are reported as exact zeros
        delta_raw.push(if dmax < MODULUS_SNAP { 0.0 } else { dmax });
        rho_raw.push(if rmax < MODULUS_SNAP { 0.0 } else { rmax });
        b.push(bmin);
    }

    if let ModelClass::Iid { .. } = model.class() {
        let sqrt_n = (model.n() as f64).sqrt();
        let rho_raw = iid_rho_raw(model, theta_star, v2, &radii, &dirs, opts)?;
        let mut ds = 0.0f64;
        let mut rs = 0.0f64;
        for (k, &r) in radii.iter().enumerate() {
            if r > sqrt_n {
                break;
            }
            ds = ds.max(delta_raw[k] * sqrt_n / r);
            rs = rs.max(rho_raw[k] * sqrt_n / r);
        }
        let delta = radii.iter().map(|r| ds * r / sqrt_n).collect();
        let rho = radii.iter().map(|r| rs * r / sqrt_n).collect();
        return Ok(ModuliTable {
            radii,
            delta,
            rho,
            b,
            iid_rates: Some(IidRates { delta_star: ds, rho_star: rs, sqrt_n }),
        });
    }

    let delta = running_max(&delta_raw);
    let rho = running_max(&rho_raw);
    Ok(ModuliTable { radii, delta, rho, b, iid_rates: None })
}

const MODULUS_SNAP: f64 = 1e-12;

fn running_max(v: &[f64]) -> Vec<f64> {
    let mut m = 0.0f64;
    v.iter()
        .map(|&x| {
            m = m.max(x);
            m
        })
        .collect()
}

/// For i.i.d. models: `sqrt(lambda_max(v0^{-1} C(theta) v0^{-1}))`, with
/// `C(theta)` the covariance of the per-observation score increment
/// `grad l(Y, theta) - grad l(Y, theta*)`, maximised over the probe sphere.
fn iid_rho_raw(
    model: &Model,
    theta_star: &DVector<f64>,
    v2: &Spd,
    radii: &[f64],
    dirs: &[DVector<f64>],
    opts: &GeometryOptions,
) -> Result<Vec<f64>, GeometryError> {
    let family = model.iid_family().expect("i.i.d. model");
    let n = model.n() as f64;
    let p = model.p();
    let v0_2 = Spd::new(v2.matrix() / n)?;
    let v0_inv = v0_2.inv_sqrt()?;
    let vinv = v2.inv_sqrt()?;
    let law = &model.marginals()[0];
    let mut rng = stream_rng(opts.probe_seed, 0, StreamTag::Probe);
    let sample: Vec<f64> = (0..opts.probe_draws).map(|_| law.sample(&mut rng)).collect();
    let g_star: Vec<DVector<f64>> = sample.iter().map(|&y| family.gradient(y, theta_star)).collect();
    let mut out = Vec::with_capacity(radii.len());
    for &r in radii {
        if r > n.sqrt() {
            out.push(f64::NAN);
            continue;
        }
        let mut worst = 0.0f64;
        for u in dirs {
            let theta = probe_point(theta_star, &vinv, r, u);
            let c = empirical_covariance(sample.iter().zip(&g_star).map(|(&y, gs)| family.gradient(y, &theta) - gs), p);
            let m = &v0_inv * c * &v0_inv;
            worst = worst.max(symmetric_operator_norm(&m).sqrt());
        }
        out.push(worst);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    /// Fixed `g_1 = 1/2` and `nu = 1` for bounded scores (logistic GLM, LAD).
    BoundedScore,
    /// Largest grid value where the exact standardized log-MGF ratio stays below 1.
    ExactMgf,
    /// Same, from the oracle sample.
    EmpiricalMgf,
    /// No grid value passed: `g_1 = 1/2` with `nu^2` the worst ratio there.
    Fallback,
    /// Supplied by the caller.
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentCalibration {
    pub g1: f64,
    pub nu: f64,
    pub source: CalibrationSource,
    /// Worst `log E exp(mu eps) / (mu^2 / 2)` over `|mu| <= g1`.
    pub worst_ratio: f64,
}

const BOUNDED_G1: f64 = 0.5;

fn lambda_grid(max: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut x = 0.05;
    while x <= max * (1.0 + 1e-12) {
        v.push(x);
        x *= 2f64.powf(0.25);
    }
    v
}

/// Per-observation standardized log-MGF `log E exp(mu eps_i / S_i)` worst ratio over `i`.
fn worst_ratio_at(model: &Model, mu: f64, empirical: Option<&[(f64, f64)]>) -> f64 {
    match model.class() {
        ModelClass::Glm { scales, .. } => {
            let mut worst = 0.0f64;
            let mut seen: Vec<(&crate::models::Marginal, f64)> = Vec::new();
            for (law, &s) in model.marginals().iter().zip(scales) {
                if seen.iter().any(|(l, t)| *l == law && *t == s) {
                    continue;
                }
                seen.push((law, s));
                for m in [mu, -mu] {
                    let r = law.centered_log_mgf(m / s).map_or(f64::INFINITY, |v| v / (0.5 * m * m));
                    worst = worst.max(r);
                }
            }
            worst
        }
        ModelClass::Lad { .. } => {
            // eps_i = -(Bernoulli(b_i) - b_i), S_i = 1/2
            let mut worst = 0.0f64;
            for i in 0..model.n() {
                let bi = empirical.map_or(0.5, |e| e[i].0);
                for m in [mu, -mu] {
                    worst = worst.max(bernoulli_log_mgf(bi, 2.0 * m) / (0.5 * m * m));
                }
            }
            worst
        }
        ModelClass::Iid { .. } => {
            let e = empirical.expect("i.i.d. calibration needs projected scores");
            let mut worst = 0.0f64;
            for m in [mu, -mu] {
                let vals: Vec<f64> = e.iter().map(|(z, _)| m * z).collect();
                let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lme = mx + (vals.iter().map(|v| (v - mx).exp()).sum::<f64>() / vals.len() as f64).ln();
                worst = worst.max(lme / (0.5 * m * m));
            }
            worst
        }
    }
}

/// `log[b e^{l(1-b)} + (1-b) e^{-l b}]`, the centered Bernoulli log-MGF.
pub fn bernoulli_log_mgf(b: f64, l: f64) -> f64 {
    let a = l * (1.0 - b);
    let c = -l * b;
    let m = a.max(c);
    m + (b * (a - m).exp() + (1.0 - b) * (c - m).exp()).ln()
}

/// Calibrates `(g_1, nu)` for the model at `theta*`.
pub fn calibrate_exp_moment(
    model: &Model,
    theta_star: &DVector<f64>,
    v2: &Spd,
    opts: &GeometryOptions,
) -> Result<ExpMomentCalibration, GeometryError> {
    let grid = lambda_grid(opts.lambda_max);
    let bounded = model.is_lad() || model.glm_kind() == Some(GlmKind::Logistic);

    let lad_b: Option<Vec<(f64, f64)>> =
        model.is_lad().then(|| (0..model.n()).map(|i| (model.lad_b(i, theta_star), 0.0)).collect());
    let iid_proj: Vec<Vec<(f64, f64)>> = match model.class() {
        ModelClass::Iid { family } => {
            let n = model.n() as f64;
            let v0 = Spd::new(v2.matrix() / n)?;
            let dirs = quasi_random_directions(model.p(), opts.directions);
            let law = &model.marginals()[0];
            let sample: Vec<f64> = match model.oracle_sample() {
                Some(s) => s[..s.len().min(opts.probe_draws.max(10_000))].to_vec(),
                None => {
                    let mut rng = stream_rng(opts.probe_seed, 1, StreamTag::Probe);
                    (0..opts.probe_draws.max(10_000)).map(|_| law.sample(&mut rng)).collect()
                }
            };
            let scores: Vec<DVector<f64>> = sample.iter().map(|&y| family.gradient(y, theta_star)).collect();
            let mean = scores.iter().fold(DVector::zeros(model.p()), |a, g| a + g) / scores.len() as f64;
            dirs.iter()
                .map(|gamma| {
                    let norm = v0.norm_of(gamma);
                    scores.iter().map(|g| ((g - &mean).dot(gamma) / norm, 0.0)).collect()
                })
                .collect()
        }
        _ => vec![],
    };
    let ratio = |mu: f64| -> f64 {
        match model.class() {
            ModelClass::Iid { .. } => iid_proj.iter().map(|e| worst_ratio_at(model, mu, Some(e))).fold(0.0, f64::max),
            _ => worst_ratio_at(model, mu, lad_b.as_deref()),
        }
    };
    let worst_up_to = |g1: f64| -> f64 {
        grid.iter().filter(|&&m| m <= g1 * (1.0 + 1e-12)).map(|&m| ratio(m)).fold(ratio(g1), f64::max)
    };

    if let Some(g1) = opts.g1 {
        let worst = worst_up_to(g1);
        return Ok(ExpMomentCalibration {
            g1,
            nu: opts.nu.unwrap_or_else(|| worst.sqrt().max(1.0)),
            source: CalibrationSource::Override,
            worst_ratio: worst,
        });
    }
    if bounded {
        // nu stays at its default; the per-observation ratio is reported only
        let worst = worst_up_to(BOUNDED_G1);
        return Ok(ExpMomentCalibration {
            g1: BOUNDED_G1,
            nu: opts.nu.unwrap_or(1.0),
            source: CalibrationSource::BoundedScore,
            worst_ratio: worst,
        });
    }
    let mut best: Option<(f64, f64)> = None;
    let mut worst_so_far = 0.0f64;
    for &m in &grid {
        worst_so_far = worst_so_far.max(ratio(m));
        if worst_so_far <= 1.0 + 1e-9 {
            best = Some((m, worst_so_far));
        } else {
            break;
        }
    }
    let source =
        if model.iid_family().is_some() { CalibrationSource::EmpiricalMgf } else { CalibrationSource::ExactMgf };
    Ok(match best {
        Some((g1, worst)) => ExpMomentCalibration { g1, nu: opts.nu.unwrap_or(1.0), source, worst_ratio: worst },
        None => {
            let worst = worst_up_to(BOUNDED_G1);
            ExpMomentCalibration {
                g1: BOUNDED_G1,
                nu: opts.nu.unwrap_or_else(|| worst.sqrt().max(1.0)),
                source: CalibrationSource::Fallback,
                worst_ratio: worst,
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentCondition {
    Ed0,
    Ed1,
}

/// Monte Carlo probe of the exponential-moment conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentProbe {
    /// Largest `estimate / (lambda^2 / 2)` over the kept grid: an empirical `nu^2`.
    pub worst_ratio: f64,
    pub ratios: Vec<(f64, f64)>,
    /// Grid points whose estimate overflowed.
    pub dropped: Vec<f64>,
}

/// Estimates `log E exp(lambda gamma^T grad zeta(theta) / |V gamma|)` from `draws`
/// simulated datasets. The `Ed1` variant uses the increment
/// `grad zeta(theta) - grad zeta(theta*)` scaled by `rho`; an identically
/// zero increment gives ratio 0.
#[allow(clippy::too_many_arguments)]
pub fn probe_exp_moment(
    model: &Model,
    theta: &DVector<f64>,
    theta_star: &DVector<f64>,
    v2: &Spd,
    gamma: &DVector<f64>,
    lambda_grid: &[f64],
    draws: usize,
    seed: u64,
    condition: MomentCondition,
    rho: f64,
) -> Result<ExpMomentProbe, GeometryError> {
    let norm = v2.norm_of(gamma);
    let mut proj = Vec::with_capacity(draws);
    for j in 0..draws {
        let y = model.sample_with(&mut stream_rng(seed, j as u64, StreamTag::Probe));
        let s = match condition {
            MomentCondition::Ed0 => model.stochastic_gradient(&y, theta)?.dot(gamma) / norm,
            MomentCondition::Ed1 => {
                let inc = model.stochastic_gradient(&y, theta)? - model.stochastic_gradient(&y, theta_star)?;
                if inc.amax() <= 1e-12 {
                    0.0
                } else {
                    inc.dot(gamma) / (rho * norm)
                }
            }
        };
        proj.push(s);
    }
    let mut ratios = Vec::new();
    let mut dropped = Vec::new();
    let mut worst = 0.0f64;
    for &l in lambda_grid {
        if proj.iter().all(|&s| s == 0.0) {
            ratios.push((l, 0.0));
            continue;
        }
        let vals: Vec<f64> = proj.iter().map(|s| l * s).collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let est = mx + (vals.iter().map(|v| (v - mx).exp()).sum::<f64>() / draws as f64).ln();
        if !est.is_finite() || mx > 700.0 {
            dropped.push(l);
            continue;
        }
        let r = est / (0.5 * l * l);
        worst = worst.max(r);
        ratios.push((l, r));
    }
    Ok(ExpMomentProbe { worst_ratio: worst, ratios, dropped })
}

/// Everything the bounds need about the model near `theta*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGeometry {
    pub model: String,
    pub n: usize,
    pub p: usize,
    pub target: Target,
    pub d2: Spd,
    pub v2: Spd,
    pub a: f64,
    pub nu: f64,
    pub g: f64,
    pub calibration: ExpMomentCalibration,
    /// `N` for regression models, `n` for i.i.d. ones.
    pub effective_n: f64,
    pub tail: Option<TailParams>,
    pub tail_error: Option<String>,
    pub moduli: ModuliTable,
}

impl LocalGeometry {
    pub fn compute(model: &Model, opts: &GeometryOptions) -> Result<Self, GeometryError> {
        let target = compute_target(model)?;
        let theta_star = target.vector();
        let (d2, v2) = fisher_matrices(model, &theta_star)?;
        let a = identifiability_constant(&d2, &v2)?;
        let effective_n = match model.class() {
            ModelClass::Glm { scales, .. } => glm_effective_n(model.design().expect("design"), scales, &v2)?,
            ModelClass::Lad { .. } => {
                let half = vec![0.5; model.n()];
                glm_effective_n(model.design().expect("design"), &half, &v2)?
            }
            ModelClass::Iid { .. } => model.n() as f64,
        };
        let calibration = calibrate_exp_moment(model, &theta_star, &v2, opts)?;
        let g = calibration.g1 * effective_n.sqrt();
        let nu = calibration.nu;
        let (tail, tail_error) = match spectral_stats(&d2, &v2, nu, g) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let moduli = local_moduli(model, &theta_star, &d2, &v2, opts)?;
        Ok(Self {
            model: model.label(),
            n: model.n(),
            p: model.p(),
            target,
            d2,
            v2,
            a,
            nu,
            g,
            calibration,
            effective_n,
            tail,
            tail_error,
            moduli,
        })
    }

    pub fn theta_star(&self) -> DVector<f64> {
        self.target.vector()
    }

    pub fn d_inv(&self) -> DMatrix<f64> {
        self.d2.inv_sqrt().expect("D^2 checked nonsingular")
    }

    pub fn v_inv(&self) -> DMatrix<f64> {
        self.v2.inv_sqrt().expect("V^2 checked nonsingular")
    }

    pub fn tail(&self) -> Result<&TailParams, GeometryError> {
        self.tail.as_ref().ok_or_else(|| GeometryError::TailUndefined(self.tail_error.clone().unwrap_or_default()))
    }

    pub fn lambda0(&self) -> f64 {
        self.a * self.a
    }
}
