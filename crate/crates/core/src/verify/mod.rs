//! Monte Carlo replication engine and empirical checks of the finite-sample
//! statements.

mod checks;
mod records;

pub use checks::*;
pub use records::{write_plot_csv, write_records_csv};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{
    bracket_process_eval, bracket_score, make_bracket, resolve_radius, BoundsError, Bracket, ResolvedRadius,
};
use crate::estimation::{fit_with_target, FitOptions, FitStatus};
use crate::exec::{map_indexed, Execution};
use crate::geometry::{GeometryError, GeometryOptions, LocalGeometry};
use crate::linalg::quasi_random_directions;
use crate::models::Model;
use crate::rng::{stream_rng, StreamTag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

/// Locality radius: a fixed value or resolved from the geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RadiusChoice {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl Default for RadiusChoice {
    fn default() -> Self {
        RadiusChoice::Auto(AutoTag::Auto)
    }
}

impl RadiusChoice {
    pub fn value(self) -> Option<f64> {
        match self {
            RadiusChoice::Value(r) => Some(r),
            RadiusChoice::Auto(_) => None,
        }
    }
}

/// Probe grid for sup approximations over `Theta_0(r)`: `directions` unit
/// vectors times `radii` radii `r, r q, r q^2, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub directions: usize,
    pub radii: usize,
    pub ratio: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { directions: 64, radii: 8, ratio: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub replications: usize,
    #[serde(alias = "seed")]
    pub master_seed: u64,
    pub x_levels: Vec<f64>,
    pub r: RadiusChoice,
    pub grid: GridSpec,
    pub fit: FitOptions,
    pub geometry: GeometryOptions,
    /// Draws for the synthetic quadratic-form tail check.
    pub synthetic_draws: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            replications: 1000,
            master_seed: 1,
            x_levels: vec![2.0],
            r: RadiusChoice::default(),
            grid: GridSpec::default(),
            fit: FitOptions::default(),
            geometry: GeometryOptions::default(),
            synthetic_draws: 100_000,
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), VerifyError> {
        let bad = |m: &str| Err(VerifyError::InvalidScenario(m.into()));
        if self.replications < 100 {
            return bad("replications must be at least 100");
        }
        if self.x_levels.is_empty() || self.x_levels.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return bad("x_levels must be nonempty and positive");
        }
        if let Some(r) = self.r.value() {
            if !(r > 0.0 && r.is_finite()) {
                return bad("r must be positive");
            }
        }
        if self.grid.directions == 0 || self.grid.radii == 0 || !(self.grid.ratio > 0.0 && self.grid.ratio < 1.0) {
            return bad("grid needs directions, radii >= 1 and ratio in (0, 1)");
        }
        self.fit.validate().map_err(VerifyError::InvalidScenario)
    }
}

/// Point of the probe grid with its precomputed deterministic part.
#[derive(Debug, Clone)]
struct GridPoint {
    theta: DVector<f64>,
    /// `E L(theta) - E L(theta*) - (theta - theta*)^T grad E L(theta*)`.
    drift: f64,
    v_norm2: f64,
}

/// A model with its geometry, locality radius, bracket and probe grid.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: Model,
    pub spec: RunSpec,
    pub geometry: LocalGeometry,
    pub radius: ResolvedRadius,
    pub bracket: Bracket,
    grid: Vec<GridPoint>,
    d_inv: DMatrix<f64>,
    grad_el_star: DVector<f64>,
    el_star: f64,
}

impl Scenario {
    pub fn new(model: Model, spec: RunSpec) -> Result<Self, VerifyError> {
        spec.validate()?;
        let geometry = LocalGeometry::compute(&model, &spec.geometry)?;
        Self::with_geometry(model, spec, geometry)
    }

    pub fn with_geometry(model: Model, spec: RunSpec, geometry: LocalGeometry) -> Result<Self, VerifyError> {
        spec.validate()?;
        let radius = resolve_radius(&geometry, spec.x_levels[0], spec.r.value());
        let bracket = make_bracket(&geometry, radius.r);
        let theta_star = geometry.theta_star();
        let el_star = model.expected_loglik(&theta_star).map_err(GeometryError::from)?;
        let grad_el_star = model.expected_gradient(&theta_star).map_err(GeometryError::from)?;
        let v_inv = geometry.v_inv();
        let mut grid = Vec::new();
        for u in quasi_random_directions(model.p(), spec.grid.directions) {
            for j in 0..spec.grid.radii {
                let rj = radius.r * spec.grid.ratio.powi(j as i32);
                let theta = &theta_star + &v_inv * &u * rj;
                if !model.in_domain(&theta) {
                    continue;
                }
                let h = &theta - &theta_star;
                let el = model.expected_loglik(&theta).map_err(GeometryError::from)?;
                grid.push(GridPoint { drift: el - el_star - h.dot(&grad_el_star), v_norm2: rj * rj, theta });
            }
        }
        let d_inv = geometry.d_inv();
        Ok(Self { model, spec, geometry, radius, bracket, grid, d_inv, grad_el_star, el_star })
    }

    pub fn r(&self) -> f64 {
        self.radius.r
    }

    pub fn grid_size(&self) -> usize {
        self.grid.len()
    }

    /// Replication `k`: data, fit, scores and grid-approximated error terms.
    pub fn replicate(&self, k: usize) -> ReplicationRecord {
        let y = self.model.sample_with(&mut stream_rng(self.spec.master_seed, k as u64, StreamTag::Data));
        self.record_for(k, &y)
    }

    fn record_for(&self, k: usize, y: &[f64]) -> ReplicationRecord {
        let failed =
            |status: Option<FitStatus>, message: String| ReplicationRecord::failed(k, self.model.p(), status, message);
        let theta_star = self.geometry.theta_star();
        let fit = match fit_with_target(&self.model, y, &theta_star, &self.spec.fit) {
            Ok(f) => f,
            Err(e) => return failed(None, e.to_string()),
        };
        if !fit.converged {
            return failed(Some(fit.status), format!("fit did not converge: {:?}", fit.status));
        }
        let theta_hat = fit.theta();
        let excess = fit.excess.expect("target supplied");
        let (grad, l_star) = match (self.model.gradient(y, &theta_star), self.model.loglik(y, &theta_star)) {
            (Ok(g), Ok(l)) => (g, l),
            _ => return failed(Some(fit.status), "likelihood undefined at theta*".into()),
        };
        let xi = &self.d_inv * &grad;
        let (xi_flat, xi_sharp) = match bracket_score(&self.bracket, &grad) {
            Ok(v) => v,
            Err(e) => return failed(Some(fit.status), e.to_string()),
        };
        let v2 = &self.geometry.v2;
        let h_hat = &theta_hat - &theta_star;
        let v_dist = v2.norm_of(&h_hat);
        let r = self.radius.r;
        let in_locality = v_dist <= r;
        let sharp = self.bracket.sharp().expect("sharp matrix is positive definite");
        let sharp_inv = sharp.inv_sqrt().expect("nonsingular");
        let h_sharp = &sharp_inv * &xi_sharp;
        let lower_solution_local = v2.norm_of(&h_sharp) <= r;
        let omega = self.bracket.omega;

        // residual of the stochastic part, its bracket slack and the sandwich gaps
        let eval = |theta: &DVector<f64>, drift: f64, v_norm2: f64| -> Option<(f64, f64, f64, f64)> {
            let l = self.model.loglik(y, theta).ok()? - l_star;
            let h = theta - &theta_star;
            let zeta = l - drift - h.dot(&grad);
            let up = zeta - 0.5 * omega * v_norm2;
            let lo = -zeta - 0.5 * omega * v_norm2;
            let (lf, ls) = bracket_process_eval(&self.bracket, &grad, theta, &theta_star);
            Some((up, lo, l - lf, ls - l))
        };
        let mut evals: Vec<(f64, f64, f64, f64)> =
            self.grid.iter().filter_map(|g| eval(&g.theta, g.drift, g.v_norm2)).collect();
        let mut extra = Vec::new();
        if in_locality {
            extra.push(theta_hat.clone());
        }
        if lower_solution_local {
            extra.push(&theta_star + &h_sharp);
        }
        for theta in &extra {
            let h = theta - &theta_star;
            let drift = match self.model.expected_loglik(theta) {
                Ok(el) => el - self.el_star - h.dot(&self.grad_el_star),
                Err(_) => continue,
            };
            if let Some(e) = eval(theta, drift, v2.quad_form(&h)) {
                evals.push(e);
            }
        }
        let err_upper_raw = evals.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
        let err_lower_raw = evals.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let err_upper_emp = err_upper_raw.max(0.0);
        let err_lower_emp = err_lower_raw.max(0.0);
        let sandwich_gap =
            evals.iter().map(|e| (e.2 - err_upper_emp).max(e.3 - err_lower_emp)).fold(f64::NEG_INFINITY, f64::max);

        let flat = self.bracket.flat().expect("bracket checked valid");
        let fisher_residual = (flat.sqrt() * &h_hat - &xi_flat).norm_squared();
        let fisher_residual_plain = (self.geometry.d2.sqrt() * &h_hat - &xi).norm_squared();
        let half_gap = 0.5 * (xi_flat.norm_squared() - xi_sharp.norm_squared());
        let spread = err_upper_emp + err_lower_emp + half_gap;
        ReplicationRecord {
            rep: k,
            converged: true,
            status: Some(fit.status),
            message: None,
            theta_hat: fit.theta_hat,
            excess,
            xi_norm2: xi.norm_squared(),
            xi_flat_norm2: xi_flat.norm_squared(),
            xi_sharp_norm2: xi_sharp.norm_squared(),
            v_dist,
            d_flat_dist: flat.norm_of(&h_hat),
            in_locality,
            lower_solution_local,
            err_upper_emp,
            err_lower_emp,
            err_upper_raw,
            err_lower_raw,
            sandwich_gap,
            fisher_residual,
            fisher_residual_plain,
            wilks_gap: (2.0 * excess - xi.norm_squared()).abs(),
            spread,
            xi: xi.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub converged: bool,
    pub status: Option<FitStatus>,
    pub message: Option<String>,
    pub theta_hat: Vec<f64>,
    /// `L(theta_tilde) - L(theta*)`.
    pub excess: f64,
    pub xi_norm2: f64,
    pub xi_flat_norm2: f64,
    pub xi_sharp_norm2: f64,
    /// `|V (theta_tilde - theta*)|`.
    pub v_dist: f64,
    /// `|D_flat (theta_tilde - theta*)|`.
    pub d_flat_dist: f64,
    pub in_locality: bool,
    pub lower_solution_local: bool,
    pub err_upper_emp: f64,
    pub err_lower_emp: f64,
    pub err_upper_raw: f64,
    pub err_lower_raw: f64,
    /// Largest excess of the sandwich `L_sharp - err_lower <= L <= L_flat + err_upper` on the grid.
    pub sandwich_gap: f64,
    /// `|D_flat (theta_tilde - theta*) - xi_flat|^2`.
    pub fisher_residual: f64,
    /// `|D (theta_tilde - theta*) - xi|^2`.
    pub fisher_residual_plain: f64,
    /// `|2 L(theta_tilde, theta*) - |xi|^2|`.
    pub wilks_gap: f64,
    pub spread: f64,
    pub xi: Vec<f64>,
}

impl ReplicationRecord {
    fn failed(rep: usize, p: usize, status: Option<FitStatus>, message: String) -> Self {
        Self {
            rep,
            converged: false,
            status,
            message: Some(message),
            theta_hat: vec![f64::NAN; p],
            excess: f64::NAN,
            xi_norm2: f64::NAN,
            xi_flat_norm2: f64::NAN,
            xi_sharp_norm2: f64::NAN,
            v_dist: f64::NAN,
            d_flat_dist: f64::NAN,
            in_locality: false,
            lower_solution_local: false,
            err_upper_emp: f64::NAN,
            err_lower_emp: f64::NAN,
            err_upper_raw: f64::NAN,
            err_lower_raw: f64::NAN,
            sandwich_gap: f64::NAN,
            fisher_residual: f64::NAN,
            fisher_residual_plain: f64::NAN,
            wilks_gap: f64::NAN,
            spread: f64::NAN,
            xi: vec![f64::NAN; p],
        }
    }

    /// Membership in the event `C(r)`.
    pub fn in_c(&self) -> bool {
        self.converged && self.in_locality && self.lower_solution_local
    }
}

/// Runs every replication, in index order regardless of `exec`.
pub fn run_replications(scenario: &Scenario, exec: Execution) -> Vec<ReplicationRecord> {
    map_indexed(scenario.spec.replications, exec, |k| scenario.replicate(k))
}

pub fn failure_fraction(records: &[ReplicationRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| !r.converged).count() as f64 / records.len() as f64
}
