//! Bracketing objects and the explicit bound functions: the error bound
//! `zq(x, Q)`, the quadratic-form tail `z(x, B)`, matrix-gap constants,
//! spreads, concentration radii and confidence critical values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, LocalGeometry, TailParams};
use crate::linalg::{symmetric_eigenvalues, LinalgError, Spd};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("bound inapplicable: {0}")]
    Inapplicable(String),
    #[error("bracket too wide: tau = {tau} >= 1")]
    BracketTooWide { tau: f64 },
    #[error("bracket is invalid: lower curvature matrix is not positive semidefinite")]
    InvalidBracket,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `Q = c p` with `c = 2.7` for `p = 1` and `c = 2` otherwise.
pub fn entropy_q(p: usize) -> f64 {
    if p == 1 {
        2.7
    } else {
        2.0 * p as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub delta: f64,
    pub omega: f64,
    #[serde(with = "crate::linalg::rows")]
    pub db2: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    pub ds2: DMatrix<f64>,
    pub valid: bool,
}

/// `D_flat^2 = (1 - delta) D^2 - omega V^2`, `D_sharp^2 = (1 + delta) D^2 + omega V^2`.
pub fn bracket_from(d2: &Spd, v2: &Spd, delta: f64, omega: f64) -> Bracket {
    let db2 = d2.matrix() * (1.0 - delta) - v2.matrix() * omega;
    let ds2 = d2.matrix() * (1.0 + delta) + v2.matrix() * omega;
    let eig = symmetric_eigenvalues(&db2);
    let lmax = eig.last().copied().unwrap_or(0.0).max(0.0);
    let valid = delta.is_finite() && omega.is_finite() && lmax > 0.0 && eig[0] >= -1e-10 * lmax;
    Bracket { delta, omega, db2, ds2, valid }
}

/// Bracket at radius `r` with the minimal admissible `(delta(r), 3 nu rho(r))`.
pub fn make_bracket(geometry: &LocalGeometry, r: f64) -> Bracket {
    let delta = geometry.moduli.delta_at(r);
    let omega = 3.0 * geometry.nu * geometry.moduli.rho_at(r);
    bracket_from(&geometry.d2, &geometry.v2, delta, omega)
}

impl Bracket {
    fn spd(m: &DMatrix<f64>) -> Result<Spd, BoundsError> {
        let s = Spd::new(m.clone()).map_err(|_| BoundsError::InvalidBracket)?;
        s.ensure_nonsingular().map_err(|_| BoundsError::InvalidBracket)?;
        Ok(s)
    }

    pub fn flat(&self) -> Result<Spd, BoundsError> {
        if !self.valid {
            return Err(BoundsError::InvalidBracket);
        }
        Self::spd(&self.db2)
    }

    pub fn sharp(&self) -> Result<Spd, BoundsError> {
        Self::spd(&self.ds2)
    }
}

/// `(xi_flat, xi_sharp) = (D_flat^{-1} grad, D_sharp^{-1} grad)`.
pub fn bracket_score(bracket: &Bracket, grad: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), BoundsError> {
    let flat = bracket.flat()?.inv_sqrt()? * grad;
    let sharp = bracket.sharp()?.inv_sqrt()? * grad;
    Ok((flat, sharp))
}

/// `(L_flat(theta, theta*), L_sharp(theta, theta*))`.
pub fn bracket_process_eval(
    bracket: &Bracket,
    grad: &DVector<f64>,
    theta: &DVector<f64>,
    theta_star: &DVector<f64>,
) -> (f64, f64) {
    let h = theta - theta_star;
    let lin = h.dot(grad);
    (lin - 0.5 * h.dot(&(&bracket.db2 * &h)), lin - 0.5 * h.dot(&(&bracket.ds2 * &h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrBranch {
    Quadratic,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrBound {
    pub value: f64,
    pub q: f64,
    pub g_d: f64,
    pub branch: ErrBranch,
}

/// `zq(x, Q)` with `Q` supplied directly.
pub fn err_bound_q(x: f64, q: f64, g_d: f64) -> Result<ErrBound, BoundsError> {
    if !(g_d >= 3.0) {
        return Err(BoundsError::Inapplicable(format!("g_d = {g_d} is below 3")));
    }
    let s = 1.0 + (x + q).sqrt();
    Ok(if s <= g_d {
        ErrBound { value: s * s, q, g_d, branch: ErrBranch::Quadratic }
    } else {
        let t = 2.0 * (x + q) / g_d + g_d;
        ErrBound { value: 1.0 + t * t, q, g_d, branch: ErrBranch::Linear }
    })
}

/// `zq(x, Q)` with `Q = c p` and `g_d = g nu`.
pub fn err_bound(x: f64, p: usize, g: f64, nu: f64) -> Result<ErrBound, BoundsError> {
    err_bound_q(x, entropy_q(p), g * nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailBranch {
    Gaussian,
    Exponential,
    Beyond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadTail {
    pub z: f64,
    /// Bound on `P(|xi|^2 / lambda0 >= z)`.
    pub probability: f64,
    pub branch: TailBranch,
}

pub fn quad_tail(x: f64, tail: &TailParams) -> QuadTail {
    let va = tail.v_a();
    let small = 2.0 * (-x).exp() + 8.4 * (-tail.xc).exp();
    if x <= va / 18.0 {
        QuadTail { z: tail.dim_a + 2.0 * va * x.sqrt(), probability: small, branch: TailBranch::Gaussian }
    } else if x <= tail.xc {
        QuadTail { z: tail.dim_a + 6.0 * x, probability: small, branch: TailBranch::Exponential }
    } else {
        let t = tail.yc + 2.0 * (x - tail.xc) / tail.gc;
        QuadTail { z: t * t, probability: 8.4 * (-x).exp(), branch: TailBranch::Beyond }
    }
}

/// `tau = delta + omega a^2`, `alpha = 2 tau / (1 - tau^2)`.
pub fn tau_alpha(delta: f64, omega: f64, a: f64) -> Result<(f64, f64), BoundsError> {
    let tau = delta + omega * a * a;
    if !(tau < 1.0) {
        return Err(BoundsError::BracketTooWide { tau });
    }
    Ok((tau, 2.0 * tau / (1.0 - tau * tau)))
}

/// `2 omega zq + alpha lambda0 z`.
pub fn spread_bound(omega: f64, zq: f64, alpha: f64, lambda0: f64, z: f64) -> f64 {
    let first = if omega == 0.0 { 0.0 } else { 2.0 * omega * zq };
    first + alpha * lambda0 * z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadReport {
    pub err_upper: f64,
    pub err_lower: f64,
    pub half_norm_gap: f64,
    pub spread: f64,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
}

pub fn spread_empirical(
    err_upper: f64,
    err_lower: f64,
    xi_flat: &DVector<f64>,
    xi_sharp: &DVector<f64>,
) -> SpreadReport {
    let half_norm_gap = 0.5 * (xi_flat.norm_squared() - xi_sharp.norm_squared());
    SpreadReport {
        err_upper,
        err_lower,
        half_norm_gap,
        spread: err_upper + err_lower + half_norm_gap,
        tau: None,
        alpha: None,
    }
}

impl SpreadReport {
    pub fn with_gap(mut self, tau: f64, alpha: f64) -> Self {
        self.tau = Some(tau);
        self.alpha = Some(alpha);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub k: usize,
    pub radius: f64,
    pub b: f64,
    /// Set when the table ended before `b` dropped below `b(r0) 2^{-k}`.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRadius {
    pub r0: f64,
    pub feasible: bool,
    pub reason: Option<String>,
    /// `P(theta_tilde outside Theta_0(r0)) <= e^{-x}`.
    pub guarantee: f64,
    pub schedule: Vec<ScheduleStep>,
}

fn conditions(x: f64, q: f64, nu: f64, r: f64, b: f64, g: f64, extra: f64) -> Result<(), String> {
    let xq = x + q + extra;
    if xq < 2.5 {
        return Err(format!("x + Q = {xq} is below 2.5"));
    }
    if !(1.0 + xq.sqrt() <= 3.0 * nu * nu * g / b) {
        return Err(format!(
            "1 + sqrt(x + Q) = {} exceeds 3 nu^2 g / b = {} at r = {r}",
            1.0 + xq.sqrt(),
            3.0 * nu * nu * g / b
        ));
    }
    if !(6.0 * nu * xq.sqrt() <= r * b * (1.0 + 1e-12)) {
        return Err(format!("r b(r) = {} is below 6 nu sqrt(x + Q) = {}", r * b, 6.0 * nu * xq.sqrt()));
    }
    Ok(())
}

/// `r0 = 6 nu sqrt(x + Q) / b` under a constant drift constant `b`.
pub fn concentration_radius(x: f64, p: usize, nu: f64, b: f64, g_of_r: &dyn Fn(f64) -> f64) -> ConcentrationRadius {
    let q = entropy_q(p);
    let r0 = 6.0 * nu * (x + q).sqrt() / b;
    let reason = if b > 0.0 { conditions(x, q, nu, r0, b, g_of_r(r0), 0.0).err() } else { Some("b <= 0".into()) };
    ConcentrationRadius { r0, feasible: reason.is_none(), reason, guarantee: (-x).exp(), schedule: vec![] }
}

/// Minimal feasible `r0` on a tabulated `b(r)` with the dyadic schedule
/// `b(r_k) >= b(r0) 2^{-k}` and conditions at `x + Q + k log 2`.
pub fn concentration_radius_varying(
    x: f64,
    p: usize,
    nu: f64,
    radii: &[f64],
    b: &[f64],
    g_of_r: &dyn Fn(f64) -> f64,
) -> Result<ConcentrationRadius, BoundsError> {
    if radii.len() != b.len() || radii.is_empty() {
        return Err(BoundsError::Precondition("radius and drift tables differ in length".into()));
    }
    for k in 1..radii.len() {
        let (prev, cur) = (radii[k - 1] * b[k - 1], radii[k] * b[k]);
        if cur < prev * (1.0 - 1e-9) {
            return Err(BoundsError::Precondition(format!(
                "r b(r) decreases between r = {} and r = {}",
                radii[k - 1],
                radii[k]
            )));
        }
    }
    let q = entropy_q(p);
    let mut last_reason = String::from("no grid radius satisfies the conditions");
    for j in 0..radii.len() {
        let b0 = b[j];
        if !(b0 > 0.0) {
            continue;
        }
        let r0 = 6.0 * nu * (x + q).sqrt() / b0;
        if r0 > radii[j] * (1.0 + 1e-12) {
            continue;
        }
        if let Err(e) = conditions(x, q, nu, r0, b0, g_of_r(r0), 0.0) {
            last_reason = e;
            continue;
        }
        let mut schedule = Vec::new();
        let mut ok = true;
        let mut start = j;
        let mut k = 1;
        while start < radii.len() {
            let thr = b0 * 0.5f64.powi(k as i32);
            let drop = (start..radii.len()).find(|&i| b[i] < thr);
            if drop.is_none() && k == 1 {
                break;
            }
            let (idx, truncated) = match drop {
                Some(i) if i > 0 => (i - 1, false),
                Some(_) => (0, false),
                None => (radii.len() - 1, true),
            };
            let step = ScheduleStep { k, radius: radii[idx], b: b[idx], truncated };
            if let Err(e) =
                conditions(x, q, nu, step.radius, step.b, g_of_r(step.radius), k as f64 * std::f64::consts::LN_2)
            {
                last_reason = format!("schedule step {k}: {e}");
                ok = false;
                break;
            }
            schedule.push(step);
            if truncated {
                break;
            }
            start = drop.expect("not truncated");
            k += 1;
        }
        if ok {
            return Ok(ConcentrationRadius { r0, feasible: true, reason: None, guarantee: (-x).exp(), schedule });
        }
    }
    Ok(ConcentrationRadius {
        r0: f64::NAN,
        feasible: false,
        reason: Some(last_reason),
        guarantee: (-x).exp(),
        schedule: vec![],
    })
}

/// `z = lambda0 z(x, B) + err_upper_bound`.
pub fn confidence_critical(x: f64, tail: &TailParams, err_upper_bound: f64) -> f64 {
    tail.lambda0 * quad_tail(x, tail).z + err_upper_bound
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusSource {
    Requested,
    Concentration,
    /// The concentration radius left the region where the bracket is valid;
    /// the largest grid radius with `delta, rho <= 1/2` and `tau < 1` is used.
    AdmissibleFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRadius {
    pub r: f64,
    pub source: RadiusSource,
    pub concentration: Option<ConcentrationRadius>,
    pub concentration_error: Option<String>,
}

fn bracket_usable(geometry: &LocalGeometry, r: f64) -> bool {
    let br = make_bracket(geometry, r);
    br.valid
        && br.delta <= 0.5
        && geometry.moduli.rho_at(r) <= 0.5
        && tau_alpha(br.delta, br.omega, geometry.a).is_ok()
        && br.flat().is_ok()
}

/// Concentration radius of the geometry's drift table at level `x`.
pub fn geometry_concentration(geometry: &LocalGeometry, x: f64) -> Result<ConcentrationRadius, BoundsError> {
    let g = geometry.g;
    concentration_radius_varying(x, geometry.p, geometry.nu, &geometry.moduli.radii, &geometry.moduli.b, &|_| g)
}

/// Locality radius: the requested one, else the concentration radius when
/// the bracket is usable there, else the admissible fallback.
pub fn resolve_radius(geometry: &LocalGeometry, x: f64, requested: Option<f64>) -> ResolvedRadius {
    let conc = geometry_concentration(geometry, x);
    let (concentration, concentration_error) = match conc {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    if let Some(r) = requested {
        return ResolvedRadius { r, source: RadiusSource::Requested, concentration, concentration_error };
    }
    if let Some(c) = concentration.as_ref().filter(|c| c.feasible) {
        if bracket_usable(geometry, c.r0) {
            return ResolvedRadius { r: c.r0, source: RadiusSource::Concentration, concentration, concentration_error };
        }
    }
    let r = geometry
        .moduli
        .radii
        .iter()
        .copied()
        .rfind(|&r| bracket_usable(geometry, r))
        .unwrap_or(geometry.moduli.radii[0]);
    ResolvedRadius { r, source: RadiusSource::AdmissibleFallback, concentration, concentration_error }
}

/// A number with the probability statement that accompanies it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guaranteed<T> {
    pub value: T,
    pub guarantee: String,
}

fn guaranteed<T>(value: T, guarantee: impl Into<String>) -> Guaranteed<T> {
    Guaranteed { value, guarantee: guarantee.into() }
}

/// All bound quantities at level `x` and radius `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub x: f64,
    pub radius: ResolvedRadius,
    pub bracket: Bracket,
    pub err_bound: Option<Guaranteed<ErrBound>>,
    pub err_bound_error: Option<String>,
    /// `omega zq`, the bound on each bracketing error term.
    pub err_term_bound: Option<f64>,
    pub quad_tail: Option<Guaranteed<QuadTail>>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub gap_error: Option<String>,
    pub spread_bound: Option<Guaranteed<f64>>,
    pub confidence_critical: Option<Guaranteed<f64>>,
    pub tail_error: Option<String>,
}

pub fn bounds_report(geometry: &LocalGeometry, x: f64, requested_r: Option<f64>) -> BoundsReport {
    let radius = resolve_radius(geometry, x, requested_r);
    let bracket = make_bracket(geometry, radius.r);
    let eb = err_bound(x, geometry.p, geometry.g, geometry.nu);
    let (err_bound_g, err_bound_error) = match &eb {
        Ok(e) => (Some(guaranteed(e.clone(), format!("P(err > omega zq) <= e^-{x}"))), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let err_term_bound =
        if bracket.omega == 0.0 { Some(0.0) } else { eb.as_ref().ok().map(|e| bracket.omega * e.value) };
    let (tau, alpha, gap_error) = match tau_alpha(bracket.delta, bracket.omega, geometry.a) {
        Ok((t, a)) => (Some(t), Some(a), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    let tail = geometry.tail();
    let qt = tail.as_ref().ok().map(|t| quad_tail(x, t));
    let spread = match (&qt, alpha, &tail) {
        (Some(q), Some(a), Ok(t)) => err_term_bound.map(|eterm| {
            let zq = if bracket.omega == 0.0 { 0.0 } else { eterm / bracket.omega };
            guaranteed(
                spread_bound(bracket.omega, zq, a, t.lambda0, q.z),
                format!("P >= 1 - 4e^-{x} - 8.4e^-xc = {}", 1.0 - 4.0 * (-x).exp() - 8.4 * (-t.xc).exp()),
            )
        }),
        _ => None,
    };
    let conf = match (&tail, err_term_bound) {
        (Ok(t), Some(e)) => Some(guaranteed(
            confidence_critical(x, t, 2.0 * e),
            format!("P(theta* not covered, theta_tilde local) <= {}", 3.0 * (-x).exp() + 8.4 * (-t.xc).exp()),
        )),
        _ => None,
    };
    BoundsReport {
        x,
        radius,
        bracket,
        err_bound: err_bound_g,
        err_bound_error,
        err_term_bound,
        quad_tail: qt.map(|q| {
            let p = q.probability;
            guaranteed(q, format!("P(|xi|^2 / lambda0 >= z) <= {p}"))
        }),
        tau,
        alpha,
        gap_error,
        spread_bound: spread,
        confidence_critical: conf,
        tail_error: tail.err().map(|e| e.to_string()),
    }
}
