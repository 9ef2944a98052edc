//! Quasi-maximum-likelihood fitting.
//!
//! GLMs use damped Newton with Armijo backtracking, smooth i.i.d. families a
//! modified Newton with restarts, and LAD smoothed IRLS followed by exact
//! vertex polishing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::solve_spd;
use crate::models::{Design, GlmKind, Model, ModelClass, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("start point is infeasible: {0}")]
    InfeasibleStart(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative: stop once `|grad L| <= tol * (1 + |L|)`.
    pub gradient_tolerance: f64,
    pub line_search_shrink: f64,
    pub armijo: f64,
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iterations: 200, gradient_tolerance: 1e-9, line_search_shrink: 0.5, armijo: 1e-4, start: None }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations < 1 {
            return Err("max_iterations must be at least 1".into());
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err("gradient_tolerance must be positive".into());
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err("line_search_shrink must lie in (0, 1)".into());
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err("armijo must lie in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    /// Fitted probabilities within 1e-8 of 0 or 1: the maximiser is at infinity.
    Separation,
    /// Fitted Poisson rates below e^-23.
    Saturation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub loglik_at_max: f64,
    /// `L(theta_hat) - L(theta*)`, when a target was supplied.
    pub excess: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub status: FitStatus,
}

impl FitResult {
    pub fn theta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_hat)
    }
}

/// Logistic natural parameter beyond which `sigma(w)` is within 1e-8 of 0 or 1.
pub const SEPARATION_INDEX: f64 = 18.420_680_743_952_367;
const POISSON_SATURATION_INDEX: f64 = -23.0;

/// Maximises `L(theta)` for the model's class.
pub fn fit_qmle(model: &Model, y: &[f64], opts: &FitOptions) -> Result<FitResult, EstimationError> {
    opts.validate().map_err(|e| EstimationError::Model(ModelError::InvalidSpec(e)))?;
    match model.class() {
        ModelClass::Glm { kind, .. } => fit_glm(model, *kind, y, opts),
        ModelClass::Lad { .. } => {
            let design = model.design().expect("LAD has a design");
            let (theta, iterations) = solve_lad_counted(design, y, opts);
            Ok(FitResult {
                loglik_at_max: model.loglik(y, &theta)?,
                theta_hat: theta.iter().copied().collect(),
                excess: None,
                converged: true,
                iterations,
                status: FitStatus::Converged,
            })
        }
        ModelClass::Iid { family } => {
            let start = match &opts.start {
                Some(s) => DVector::from_column_slice(s),
                None => family.moment_start(y),
            };
            fit_iid(model, y, start, opts)
        }
    }
}

/// Same as [`fit_qmle`] with `excess = L(theta_hat) - L(theta_star)` filled in.
pub fn fit_with_target(
    model: &Model,
    y: &[f64],
    theta_star: &DVector<f64>,
    opts: &FitOptions,
) -> Result<FitResult, EstimationError> {
    let mut fit = fit_qmle(model, y, opts)?;
    fit.excess = Some(excess(model, y, &fit.theta(), theta_star)?);
    Ok(fit)
}

/// `L(theta_hat) - L(theta_star)`.
pub fn excess(
    model: &Model,
    y: &[f64],
    theta_hat: &DVector<f64>,
    theta_star: &DVector<f64>,
) -> Result<f64, ModelError> {
    Ok(model.loglik(y, theta_hat)? - model.loglik(y, theta_star)?)
}

fn converged(g: &DVector<f64>, l: f64, tol: f64) -> bool {
    g.norm() <= tol * (1.0 + l.abs())
}

fn glm_start(model: &Model, kind: GlmKind, y: &[f64], opts: &FitOptions) -> Result<DVector<f64>, EstimationError> {
    if let Some(s) = &opts.start {
        let t = DVector::from_column_slice(s);
        model.check_domain(&t).map_err(|e| EstimationError::InfeasibleStart(e.to_string()))?;
        return Ok(t);
    }
    let zero = DVector::zeros(model.p());
    if kind != GlmKind::Exponential {
        return Ok(zero);
    }
    // least-squares fit of the constant index w = 1 / |mean(Y)|
    let design = model.design().expect("GLM has a design");
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let level = 1.0 / ybar.abs().max(1e-8);
    let rhs = design.weighted_sum(DVector::from_element(design.n(), level).as_view());
    let t = solve_spd(&design.gram(), &rhs).unwrap_or(zero);
    model.check_domain(&t).map_err(|e| EstimationError::InfeasibleStart(format!("constant-index start: {e}")))?;
    Ok(t)
}

fn fit_glm(model: &Model, kind: GlmKind, y: &[f64], opts: &FitOptions) -> Result<FitResult, EstimationError> {
    let mut theta = glm_start(model, kind, y, opts)?;
    let mut l = model.loglik(y, &theta)?;
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    for it in 0..opts.max_iterations {
        iterations = it;
        let g = model.gradient(y, &theta)?;
        if converged(&g, l, opts.gradient_tolerance) {
            status = FitStatus::Converged;
            break;
        }
        let neg_h = -model.hessian(y, &theta)?;
        let step = match solve_spd(&neg_h, &g) {
            Some(s) if s.dot(&g) > 0.0 && s.iter().all(|v| v.is_finite()) => s,
            _ => g.clone(),
        };
        match backtrack(model, y, &theta, l, &g, &step, opts)? {
            Some((t, lt)) => {
                theta = t;
                l = lt;
            }
            None => {
                let g = model.gradient(y, &theta)?;
                status = if converged(&g, l, opts.gradient_tolerance) {
                    FitStatus::Converged
                } else {
                    FitStatus::LineSearchFailed
                };
                break;
            }
        }
        iterations = it + 1;
    }
    if status == FitStatus::MaxIterations {
        let g = model.gradient(y, &theta)?;
        if converged(&g, l, opts.gradient_tolerance) {
            status = FitStatus::Converged;
        }
    }
    let w = model.design().expect("GLM has a design").index(&theta);
    match kind {
        GlmKind::Logistic if w.iter().any(|v| v.abs() > SEPARATION_INDEX) => status = FitStatus::Separation,
        GlmKind::Poisson if w.iter().any(|&v| v < POISSON_SATURATION_INDEX) => status = FitStatus::Saturation,
        _ => {}
    }
    Ok(FitResult {
        theta_hat: theta.iter().copied().collect(),
        loglik_at_max: l,
        excess: None,
        converged: status == FitStatus::Converged,
        iterations,
        status,
    })
}

/// Armijo backtracking; halves on domain exits. Returns `None` if no step
/// is accepted within 60 reductions.
fn backtrack(
    model: &Model,
    y: &[f64],
    theta: &DVector<f64>,
    l: f64,
    g: &DVector<f64>,
    step: &DVector<f64>,
    opts: &FitOptions,
) -> Result<Option<(DVector<f64>, f64)>, EstimationError> {
    let slope = g.dot(step);
    let mut t = 1.0;
    for _ in 0..60 {
        let cand = theta + step * t;
        if model.in_domain(&cand) {
            let lc = model.loglik(y, &cand)?;
            if lc.is_finite() && lc >= l + opts.armijo * t * slope && lc >= l {
                return Ok(Some((cand, lc)));
            }
            // near the optimum the ascent is below the rounding level of L;
            // accept a step that keeps L within that level and shrinks the gradient
            if lc.is_finite() && lc >= l - 1e-13 * (1.0 + l.abs()) && model.gradient(y, &cand)?.norm() < g.norm() {
                return Ok(Some((cand, lc)));
            }
        }
        t *= opts.line_search_shrink;
    }
    Ok(None)
}

fn newton_iid(model: &Model, y: &[f64], start: DVector<f64>, opts: &FitOptions) -> Result<FitResult, EstimationError> {
    let mut theta = start;
    let mut l = model.loglik(y, &theta)?;
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    for it in 0..opts.max_iterations {
        iterations = it;
        let g = model.gradient(y, &theta)?;
        if converged(&g, l, opts.gradient_tolerance) {
            status = FitStatus::Converged;
            break;
        }
        let neg_h = -model.hessian(y, &theta)?;
        let step = modified_newton_step(&neg_h, &g);
        match backtrack(model, y, &theta, l, &g, &step, opts)? {
            Some((t, lt)) => {
                theta = t;
                l = lt;
            }
            None => {
                status = FitStatus::LineSearchFailed;
                break;
            }
        }
        iterations = it + 1;
    }
    if status != FitStatus::Converged && converged(&model.gradient(y, &theta)?, l, opts.gradient_tolerance) {
        status = FitStatus::Converged;
    }
    Ok(FitResult {
        theta_hat: theta.iter().copied().collect(),
        loglik_at_max: l,
        excess: None,
        converged: status == FitStatus::Converged,
        iterations,
        status,
    })
}

/// Newton direction on `-H + mu I`, with `mu` raised until the system is
/// positive definite.
fn modified_newton_step(neg_h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let p = g.len();
    let scale = neg_h.diagonal().amax().max(1e-12);
    let mut mu = 0.0;
    for _ in 0..40 {
        let m = neg_h + DMatrix::identity(p, p) * mu;
        if let Some(ch) = m.cholesky() {
            return ch.solve(g);
        }
        mu = if mu == 0.0 { 1e-8 * scale } else { mu * 10.0 };
    }
    g.clone()
}

fn fit_iid(model: &Model, y: &[f64], start: DVector<f64>, opts: &FitOptions) -> Result<FitResult, EstimationError> {
    let best = newton_iid(model, y, start.clone(), opts)?;
    let neg_h = -model.hessian(y, &best.theta())?;
    if neg_h.cholesky().is_some() && best.converged {
        return Ok(best);
    }
    // indefinite Hessian at the solution: perturbed restarts, keep the best
    let mut best = best;
    let spread = 1.0 + start.amax();
    for k in 1..=5 {
        let offset = DVector::from_fn(start.len(), |j, _| {
            let phase = (k * (j + 1)) as f64;
            0.25 * spread * (phase * 2.399_963).sin()
        });
        let cand = newton_iid(model, y, &start + offset, opts)?;
        let definite = (-model.hessian(y, &cand.theta())?).cholesky().is_some();
        if cand.converged && definite && (!best.converged || cand.loglik_at_max > best.loglik_at_max) {
            best = cand;
        }
    }
    Ok(best)
}

/// Minimises `sum_i |y_i - Psi_i^T theta|`.
pub fn solve_lad(design: &Design, y: &[f64], opts: &FitOptions) -> DVector<f64> {
    solve_lad_counted(design, y, opts).0
}

/// `sum_i |y_i - Psi_i^T theta|`.
pub fn lad_objective(design: &Design, y: &[f64], theta: &DVector<f64>) -> f64 {
    let w = design.index(theta);
    y.iter().zip(w.iter()).map(|(a, b)| (a - b).abs()).sum()
}

fn solve_lad_counted(design: &Design, y: &[f64], opts: &FitOptions) -> (DVector<f64>, usize) {
    let n = design.n();
    let yv = DVector::from_column_slice(y);
    let x = design.matrix();
    let mut theta = match &opts.start {
        Some(s) => DVector::from_column_slice(s),
        None => solve_spd(&design.gram(), &(x.transpose() * &yv)).unwrap_or_else(|| DVector::zeros(design.p())),
    };
    let mut iterations = 0;

    // smoothed IRLS on sum sqrt(r^2 + tau^2), tau decreasing to 1e-8
    let resid_scale = {
        let mut r: Vec<f64> = (&yv - x * &theta).iter().map(|v| v.abs()).collect();
        r.sort_by(f64::total_cmp);
        r[n / 2].max(1e-3)
    };
    let mut tau = resid_scale;
    loop {
        for _ in 0..50 {
            iterations += 1;
            let r = &yv - x * &theta;
            let w: Vec<f64> = r.iter().map(|ri| 1.0 / (ri * ri + tau * tau).sqrt()).collect();
            let gram = design.weighted_gram(&w);
            let rhs = x.transpose() * DVector::from_fn(n, |i, _| w[i] * y[i]);
            let Some(next) = solve_spd(&gram, &rhs) else { break };
            let change = (&next - &theta).amax();
            theta = next;
            if change <= 1e-12 * (1.0 + theta.amax()) {
                break;
            }
        }
        if tau <= 1e-8 {
            break;
        }
        tau = (tau * 0.1).max(1e-8);
    }

    let (polished, pivots) = polish_vertex(design, y, theta);
    (polished, iterations + pivots)
}

/// Moves to a basic solution (p zero residuals) near `theta`, then pivots
/// along edges while the objective decreases. Each edge is searched exactly:
/// the objective along a line is minimised at a weighted median.
fn polish_vertex(design: &Design, y: &[f64], theta: DVector<f64>) -> (DVector<f64>, usize) {
    let n = design.n();
    let p = design.p();
    let x = design.matrix();
    let r0 = DVector::from_column_slice(y) - x * &theta;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| r0[a].abs().total_cmp(&r0[b].abs()).then(a.cmp(&b)));

    let mut basis: Vec<usize> = Vec::with_capacity(p);
    for &i in &order {
        let mut trial = basis.clone();
        trial.push(i);
        if rank_full(x, &trial) {
            basis = trial;
        }
        if basis.len() == p {
            break;
        }
    }
    let Some(mut theta_v) = solve_basis(x, y, &basis) else {
        return (theta, 0);
    };
    let start_obj = lad_objective(design, y, &theta);
    let mut obj = lad_objective(design, y, &theta_v);

    let mut pivots = 0;
    let max_pivots = 50 * n.max(10);
    'outer: while pivots < max_pivots {
        let Some(inv) = basis_inverse(x, &basis) else { break };
        for k in 0..p {
            // direction keeping the other basis residuals at zero, with Psi_k^T d = 1
            let d = inv.column(k).into_owned();
            let a = x * &d;
            let r = DVector::from_column_slice(y) - x * &theta_v;
            let mut pts: Vec<(f64, f64, usize)> = (0..n)
                .filter(|&i| a[i].abs() > 1e-14 && (i == basis[k] || !basis.contains(&i)))
                .map(|i| (r[i] / a[i], a[i].abs(), i))
                .collect();
            if pts.is_empty() {
                continue;
            }
            pts.sort_by(|u, v| u.0.total_cmp(&v.0).then(u.2.cmp(&v.2)));
            let total: f64 = pts.iter().map(|q| q.1).sum();
            let mut acc = 0.0;
            let mut pick = pts[pts.len() - 1];
            for q in &pts {
                acc += q.1;
                if acc >= 0.5 * total {
                    pick = *q;
                    break;
                }
            }
            let (t, _, j) = pick;
            if j == basis[k] || t == 0.0 {
                continue;
            }
            let cand = &theta_v + &d * t;
            let cand_obj = lad_objective(design, y, &cand);
            if cand_obj < obj - 1e-13 * (1.0 + obj) {
                let mut nb = basis.clone();
                nb[k] = j;
                if let Some(exact) = solve_basis(x, y, &nb) {
                    let exact_obj = lad_objective(design, y, &exact);
                    if exact_obj <= cand_obj + 1e-12 * (1.0 + cand_obj) {
                        theta_v = exact;
                        obj = exact_obj;
                        basis = nb;
                        pivots += 1;
                        continue 'outer;
                    }
                }
            }
        }
        break;
    }
    if obj <= start_obj {
        (theta_v, pivots)
    } else {
        (theta, pivots)
    }
}

fn rows_of(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |a, b| x[(idx[a], b)])
}

fn rank_full(x: &DMatrix<f64>, idx: &[usize]) -> bool {
    let m = rows_of(x, idx);
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    max > 0.0 && sv.min() > 1e-10 * max && sv.len() == idx.len()
}

fn basis_inverse(x: &DMatrix<f64>, basis: &[usize]) -> Option<DMatrix<f64>> {
    rows_of(x, basis).try_inverse()
}

fn solve_basis(x: &DMatrix<f64>, y: &[f64], basis: &[usize]) -> Option<DVector<f64>> {
    let m = rows_of(x, basis);
    let rhs = DVector::from_fn(basis.len(), |a, _| y[basis[a]]);
    m.lu().solve(&rhs)
}
