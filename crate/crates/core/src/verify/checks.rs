use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{failure_fraction, ReplicationRecord, Scenario};
use crate::bounds::{
    confidence_critical, err_bound, geometry_concentration, quad_tail, ConcentrationRadius, RadiusSource,
};
use crate::geometry::TailParams;
use crate::linalg::Spd;
use crate::rng::{stream_rng, StreamTag};

/// Absolute slack for the deterministic sandwich and Wilks inequalities.
pub const SANDWICH_TOL: f64 = 1e-7;
/// Slack absorbing round-off in the error-term exceedance test.
pub const ERR_TAIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// More records fell outside the conditioning event than inside it.
    OutOfRegime,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Violation frequency against a probability bound, 3-sigma slack.
    Rate,
    /// Deterministic inequality: any violation fails.
    ZeroTarget,
    /// Empirical statistic against an empirical or analytic reference.
    Comparison,
    /// Monotone trend across a scenario family.
    Trend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub kind: CheckKind,
    pub x: Option<f64>,
    pub empirical: f64,
    pub bound: f64,
    pub violations: usize,
    pub included: usize,
    pub excluded: usize,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub status: CheckStatus,
    pub note: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        matches!(self.status, CheckStatus::Pass | CheckStatus::NotApplicable)
    }

    fn not_applicable(name: &str, x: Option<f64>, note: String) -> Self {
        Self {
            name: name.into(),
            kind: CheckKind::Rate,
            x,
            empirical: f64::NAN,
            bound: f64::NAN,
            violations: 0,
            included: 0,
            excluded: 0,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
            status: CheckStatus::NotApplicable,
            note: Some(note),
        }
    }
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let phat = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (phat + z * z / (2.0 * nf)) / denom;
    let half = z * (phat * (1.0 - phat) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// `bound + 3 sqrt(bound (1 - bound) / n)`.
pub fn three_sigma_limit(bound: f64, n: usize) -> f64 {
    let b = bound.clamp(0.0, 1.0);
    b + 3.0 * (b * (1.0 - b) / n.max(1) as f64).sqrt()
}

fn regime(included: usize, excluded: usize) -> bool {
    excluded <= included && included > 0
}

pub fn rate_report(
    name: &str,
    x: Option<f64>,
    violations: usize,
    included: usize,
    excluded: usize,
    bound: f64,
    note: Option<String>,
) -> CheckReport {
    let (ci_lo, ci_hi) = wilson_interval(violations, included);
    let empirical = if included == 0 { 0.0 } else { violations as f64 / included as f64 };
    let status = if !regime(included, excluded) {
        CheckStatus::OutOfRegime
    } else if empirical <= three_sigma_limit(bound, included) {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    CheckReport {
        name: name.into(),
        kind: CheckKind::Rate,
        x,
        empirical,
        bound,
        violations,
        included,
        excluded,
        ci_lo,
        ci_hi,
        status,
        note,
    }
}

pub fn zero_report(
    name: &str,
    x: Option<f64>,
    violations: usize,
    included: usize,
    excluded: usize,
    note: Option<String>,
) -> CheckReport {
    let mut r = rate_report(name, x, violations, included, excluded, 0.0, note);
    r.kind = CheckKind::ZeroTarget;
    if r.status != CheckStatus::OutOfRegime {
        r.status = if violations == 0 { CheckStatus::Pass } else { CheckStatus::Fail };
    }
    r
}

fn converged(records: &[ReplicationRecord]) -> impl Iterator<Item = &ReplicationRecord> {
    records.iter().filter(|r| r.converged)
}

fn split_c(records: &[ReplicationRecord]) -> (Vec<&ReplicationRecord>, usize) {
    let inside: Vec<_> = records.iter().filter(|r| r.in_c()).collect();
    let excluded = records.len() - inside.len();
    (inside, excluded)
}

/// `omega zq(x)`, the level the upper error term exceeds with probability at most `e^{-x}`.
pub fn err_term_threshold(scenario: &Scenario, x: f64) -> Result<f64, String> {
    let omega = scenario.bracket.omega;
    if omega == 0.0 {
        return Ok(0.0);
    }
    let g = &scenario.geometry;
    err_bound(x, g.p, g.g, g.nu).map(|e| omega * e.value).map_err(|e| e.to_string())
}

/// Sandwich on the grid and the error-term tail.
pub fn check_bracketing(records: &[ReplicationRecord], scenario: &Scenario, x: f64) -> Vec<CheckReport> {
    let ok: Vec<_> = converged(records).collect();
    let excluded = records.len() - ok.len();
    let sandwich = ok.iter().filter(|r| r.sandwich_gap > SANDWICH_TOL).count();
    let mut out = vec![zero_report(
        "bracketing_sandwich",
        None,
        sandwich,
        ok.len(),
        excluded,
        Some(format!(
            "r = {:.6}, delta = {:.6}, omega = {:.6}",
            scenario.r(),
            scenario.bracket.delta,
            scenario.bracket.omega
        )),
    )];
    out.push(match err_term_threshold(scenario, x) {
        Ok(t) => {
            let exceed = ok.iter().filter(|r| r.err_upper_emp > t + ERR_TAIL_SLACK).count();
            rate_report(
                "error_tail",
                Some(x),
                exceed,
                ok.len(),
                excluded,
                (-x).exp(),
                Some(format!("threshold omega zq = {t}")),
            )
        }
        Err(e) => CheckReport::not_applicable("error_tail", Some(x), e),
    });
    out
}

/// `|xi_sharp|^2/2 - err_lower <= L(theta_tilde, theta*) <= |xi_flat|^2/2 + err_upper` on `C(r)`.
pub fn check_wilks(records: &[ReplicationRecord]) -> CheckReport {
    let (inside, excluded) = split_c(records);
    let violations = inside
        .iter()
        .filter(|r| {
            r.excess > 0.5 * r.xi_flat_norm2 + r.err_upper_emp + SANDWICH_TOL
                || r.excess < 0.5 * r.xi_sharp_norm2 - r.err_lower_emp - SANDWICH_TOL
        })
        .count();
    zero_report("wilks", None, violations, inside.len(), excluded, None)
}

/// `|D_flat (theta_tilde - theta*) - xi_flat|^2 <= 2 spread` on `C(r)`.
pub fn check_fisher(records: &[ReplicationRecord]) -> CheckReport {
    let (inside, excluded) = split_c(records);
    let violations = inside.iter().filter(|r| r.fisher_residual > 2.0 * r.spread + SANDWICH_TOL).count();
    let med = median(inside.iter().map(|r| r.fisher_residual).collect());
    zero_report("fisher", None, violations, inside.len(), excluded, Some(format!("median residual {med}")))
}

/// Non-coverage `{2 L(theta_tilde, theta*) > z, theta_tilde local}` against `bound`.
pub fn check_coverage(records: &[ReplicationRecord], z_crit: f64, bound: f64, x: f64) -> CheckReport {
    let ok: Vec<_> = converged(records).collect();
    let excluded = records.len() - ok.len();
    let misses = ok.iter().filter(|r| r.in_locality && 2.0 * r.excess > z_crit).count();
    rate_report("coverage", Some(x), misses, ok.len(), excluded, bound, Some(format!("critical value {z_crit}")))
}

/// `P(|V (theta_tilde - theta*)| > r0) <= e^{-x}`.
pub fn check_concentration(records: &[ReplicationRecord], r0: &ConcentrationRadius, x: f64) -> CheckReport {
    if !r0.feasible {
        return CheckReport::not_applicable(
            "concentration",
            Some(x),
            format!("concentration radius infeasible: {}", r0.reason.clone().unwrap_or_default()),
        );
    }
    let ok: Vec<_> = converged(records).collect();
    let excluded = records.len() - ok.len();
    let outside = ok.iter().filter(|r| r.v_dist > r0.r0).count();
    rate_report("concentration", Some(x), outside, ok.len(), excluded, (-x).exp(), Some(format!("r0 = {}", r0.r0)))
}

/// `P(|D_flat (theta_tilde - theta*)| > z, C(r))` against `P(|xi_flat| > z - sqrt(2 spread))`.
pub fn check_concentration_local(records: &[ReplicationRecord], z: f64, x: f64) -> CheckReport {
    let ok: Vec<_> = converged(records).collect();
    let excluded = records.len() - ok.len();
    let n = ok.len();
    let lhs = ok.iter().filter(|r| r.in_c() && r.d_flat_dist > z).count();
    let rhs = ok.iter().filter(|r| r.xi_flat_norm2.sqrt() > z - (2.0 * r.spread.max(0.0)).sqrt()).count();
    let mut rep = rate_report(
        "concentration_local",
        Some(x),
        lhs,
        n,
        excluded,
        rhs as f64 / n.max(1) as f64,
        Some(format!("z = {z}")),
    );
    rep.kind = CheckKind::Comparison;
    rep
}

/// `P(|xi|^2 / lambda0 >= z(x, B))` at each level, plus the mean of `|xi|^2` against `dim_A`.
pub fn check_quad_tail(name: &str, xi_norm2: &[f64], tail: &TailParams, x_levels: &[f64]) -> Vec<CheckReport> {
    let n = xi_norm2.len();
    let mut out = Vec::new();
    for &x in x_levels {
        let q = quad_tail(x, tail);
        let hits = xi_norm2.iter().filter(|&&v| v / tail.lambda0 >= q.z).count();
        out.push(rate_report(name, Some(x), hits, n, 0, q.probability, Some(format!("z = {}", q.z))));
    }
    let mean = xi_norm2.iter().sum::<f64>() / n.max(1) as f64;
    let var = xi_norm2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    let sigma = (var / n.max(1) as f64).sqrt();
    let status = if mean <= tail.dim_a + 3.0 * sigma { CheckStatus::Pass } else { CheckStatus::Fail };
    out.push(CheckReport {
        name: format!("{name}_mean"),
        kind: CheckKind::Comparison,
        x: None,
        empirical: mean,
        bound: tail.dim_a,
        violations: 0,
        included: n,
        excluded: 0,
        ci_lo: mean - 1.96 * sigma,
        ci_hi: mean + 1.96 * sigma,
        status,
        note: Some(format!("standard error {sigma}")),
    });
    out
}

/// `|xi|^2` for `draws` Gaussian vectors with covariance `B`.
pub fn synthetic_xi_norms(b: &Spd, draws: usize, seed: u64) -> Vec<f64> {
    const BLOCK: usize = 4096;
    let root = b.sqrt();
    let p = b.dim();
    let mut out = Vec::with_capacity(draws);
    let mut block = 0u64;
    while out.len() < draws {
        let mut rng = stream_rng(seed, block, StreamTag::Synthetic);
        for _ in 0..BLOCK.min(draws - out.len()) {
            let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            out.push((&root * z).norm_squared());
        }
        block += 1;
    }
    out
}

fn paired_report(name: &str, lhs: Vec<f64>, rhs: Vec<f64>, excluded: usize, note: String) -> CheckReport {
    let n = lhs.len();
    let d: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let mean_d = d.iter().sum::<f64>() / n.max(1) as f64;
    let var = d.iter().map(|v| (v - mean_d).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    let se = (var / n.max(1) as f64).sqrt();
    let empirical = lhs.iter().sum::<f64>() / n.max(1) as f64;
    let bound = rhs.iter().sum::<f64>() / n.max(1) as f64;
    let status = if n == 0 || mean_d <= 3.0 * se { CheckStatus::Pass } else { CheckStatus::Fail };
    CheckReport {
        name: name.into(),
        kind: CheckKind::Comparison,
        x: None,
        empirical,
        bound,
        violations: 0,
        included: n,
        excluded,
        ci_lo: mean_d - 1.96 * se,
        ci_hi: mean_d + 1.96 * se,
        status,
        note: Some(note),
    }
}

/// Restricted moments `E[L^r 1(local)]` and `E[|D_flat h|^r 1(C)]` against their bracket counterparts.
pub fn check_risk_moments(records: &[ReplicationRecord], levels: &[u32]) -> Vec<CheckReport> {
    let ok: Vec<_> = converged(records).collect();
    let excluded = records.len() - ok.len();
    let mut out = Vec::new();
    for &r in levels {
        let ri = r as i32;
        let lhs: Vec<f64> = ok.iter().map(|x| if x.in_locality { x.excess.max(0.0).powi(ri) } else { 0.0 }).collect();
        let rhs: Vec<f64> = ok.iter().map(|x| (0.5 * x.xi_flat_norm2 + x.err_upper_emp).powi(ri)).collect();
        out.push(paired_report(&format!("risk_moment_{r}"), lhs, rhs, excluded, "paired 3-sigma comparison".into()));
        let lhs: Vec<f64> = ok.iter().map(|x| if x.in_c() { x.d_flat_dist.powi(ri) } else { 0.0 }).collect();
        let rhs: Vec<f64> =
            ok.iter().map(|x| (x.xi_flat_norm2.sqrt() + (2.0 * x.spread.max(0.0)).sqrt()).powi(ri)).collect();
        out.push(paired_report(&format!("loss_moment_{r}"), lhs, rhs, excluded, "paired 3-sigma comparison".into()));
    }
    out
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub p: usize,
    pub n: usize,
    pub median_wilks_gap: f64,
    pub median_fisher_residual: f64,
}

/// `median |2L - |xi|^2| / p` must be non-increasing in `p`.
pub fn check_dimension_scaling(family: &[(usize, usize, Vec<ReplicationRecord>)]) -> (CheckReport, Vec<ScalingRow>) {
    let rows: Vec<ScalingRow> = family
        .iter()
        .map(|(p, n, recs)| ScalingRow {
            p: *p,
            n: *n,
            median_wilks_gap: median(converged(recs).map(|r| r.wilks_gap).collect()),
            median_fisher_residual: median(converged(recs).map(|r| r.fisher_residual_plain).collect()),
        })
        .collect();
    let per_p: Vec<f64> = rows.iter().map(|r| r.median_wilks_gap / r.p as f64).collect();
    let increasing_steps = per_p.windows(2).filter(|w| w[1] > w[0]).count();
    let small_n = rows.iter().any(|r| r.n < 10 * r.p);
    let status = if increasing_steps == 0 {
        CheckStatus::Pass
    } else if small_n {
        CheckStatus::OutOfRegime
    } else {
        CheckStatus::Fail
    };
    let total: usize = family.iter().map(|f| f.2.len()).sum();
    let failed: usize = family.iter().map(|f| f.2.iter().filter(|r| !r.converged).count()).sum();
    (
        CheckReport {
            name: "dimension_scaling".into(),
            kind: CheckKind::Trend,
            x: None,
            empirical: per_p.last().copied().unwrap_or(f64::NAN),
            bound: per_p.first().copied().unwrap_or(f64::NAN),
            violations: increasing_steps,
            included: total - failed,
            excluded: failed,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
            status,
            note: Some(format!("median gap / p by p: {per_p:?}")),
        },
        rows,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub model: String,
    pub n: usize,
    pub p: usize,
    pub replications: usize,
    pub master_seed: u64,
    pub r: f64,
    pub r_source: RadiusSource,
    pub delta: f64,
    pub omega: f64,
    pub failure_fraction: f64,
    pub c_fraction: f64,
    pub checks: Vec<CheckReport>,
}

impl VerifySummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }
}

/// Every check that applies to the scenario.
pub fn run_checks(scenario: &Scenario, records: &[ReplicationRecord]) -> VerifySummary {
    let spec = &scenario.spec;
    let mut checks = Vec::new();
    for (i, &x) in spec.x_levels.iter().enumerate() {
        let mut b = check_bracketing(records, scenario, x);
        if i > 0 {
            b.retain(|c| c.name != "bracketing_sandwich");
        }
        checks.extend(b);
    }
    checks.push(check_wilks(records));
    checks.push(check_fisher(records));
    let tail = scenario.geometry.tail();
    for &x in &spec.x_levels {
        match (&tail, err_term_threshold(scenario, x)) {
            (Ok(t), Ok(e)) => {
                let z = confidence_critical(x, t, 2.0 * e);
                let bound = if scenario.bracket.omega == 0.0 { 2.0 } else { 3.0 } * (-x).exp() + 8.4 * (-t.xc).exp();
                checks.push(check_coverage(records, z, bound, x));
                checks.push(check_concentration_local(records, (t.lambda0 * quad_tail(x, t).z).sqrt(), x));
            }
            (Err(e), _) => checks.push(CheckReport::not_applicable("coverage", Some(x), e.to_string())),
            (_, Err(e)) => checks.push(CheckReport::not_applicable("coverage", Some(x), e)),
        }
        match geometry_concentration(&scenario.geometry, x) {
            Ok(c) => checks.push(check_concentration(records, &c, x)),
            Err(e) => checks.push(CheckReport::not_applicable("concentration", Some(x), e.to_string())),
        }
    }
    match &tail {
        Ok(t) => {
            let xi: Vec<f64> = converged(records).map(|r| r.xi_norm2).collect();
            checks.extend(check_quad_tail("quad_tail", &xi, t, &spec.x_levels));
            let synth = synthetic_xi_norms(&t.b, spec.synthetic_draws, spec.master_seed);
            checks.extend(check_quad_tail("quad_tail_synthetic", &synth, t, &spec.x_levels));
        }
        Err(e) => checks.push(CheckReport::not_applicable("quad_tail", None, e.to_string())),
    }
    checks.extend(check_risk_moments(records, &[1, 2]));
    let c_fraction = records.iter().filter(|r| r.in_c()).count() as f64 / records.len().max(1) as f64;
    VerifySummary {
        model: scenario.model.label(),
        n: scenario.model.n(),
        p: scenario.model.p(),
        replications: records.len(),
        master_seed: spec.master_seed,
        r: scenario.r(),
        r_source: scenario.radius.source,
        delta: scenario.bracket.delta,
        omega: scenario.bracket.omega,
        failure_fraction: failure_fraction(records),
        c_fraction,
        checks,
    }
}
