//! Acceptance criteria 1-10, one PASS/FAIL line each with its runtime.
//!
//! Runs without the libtest harness so the lines appear in `cargo test`
//! output; exits non-zero when any criterion fails.

mod common;

use std::time::Instant;

use common::oracles;
use common::*;
use fsmle::bounds::{bracket_from, bracket_score, err_bound, geometry_concentration, quad_tail, tau_alpha};
use fsmle::cli;
use fsmle::estimation::{fit_with_target, lad_objective, solve_lad, FitOptions};
use fsmle::exec::{map_indexed, Execution};
use fsmle::geometry::{compute_target, identifiability_constant, spectral_stats, GeometryOptions, LocalGeometry};
use fsmle::linalg::Spd;
use fsmle::models::{Design, GlmKind, Link, MeanSpec, Model, NoiseLaw, TruthSpec};
use fsmle::rng::{stream_rng, StreamTag};
use fsmle::verify::{
    check_bracketing, check_concentration, check_dimension_scaling, check_quad_tail, median, run_replications,
    synthetic_xi_norms, CheckStatus, RadiusChoice, ReplicationRecord, RunSpec, Scenario,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn criterion(id: u32, title: &str, budget_secs: f64, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs < budget_secs;
    let pass = v.pass && in_time;
    println!(
        "{} [{id:>2}] {title} ({secs:.2} s, limit {budget_secs} s{}): {}",
        if pass { "PASS" } else { "FAIL" },
        if in_time { "" } else { ", over time" },
        v.detail
    );
    pass
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn spec(replications: usize, seed: u64) -> RunSpec {
    RunSpec { replications, master_seed: seed, ..RunSpec::default() }
}

fn logistic_design() -> Design {
    normal_design(500, 2, 3)
}

fn misspecified_logistic() -> Model {
    let truth = TruthSpec::CustomMean {
        mean: MeanSpec::Index { theta: vec![0.3, -0.8], curvature: 0.3, link: Link::Logistic },
        noise: NoiseLaw::Bernoulli,
    };
    Model::glm(logistic_design(), GlmKind::Logistic, truth, None).unwrap()
}

fn exact_quadratic_case() -> Verdict {
    let model = glm(normal_design(200, 3, 7), GlmKind::Gaussian, &[0.5, -1.0, 0.25]);
    let scenario = Scenario::new(model, spec(200, 11)).unwrap();
    let records = run_replications(&scenario, Execution::Auto);
    let fisher = records.iter().map(|r| r.fisher_residual_plain.sqrt()).fold(0.0, f64::max);
    let wilks = records.iter().map(|r| r.wilks_gap).fold(0.0, f64::max);
    let all = records.iter().all(|r| r.converged);
    verdict(
        all && fisher <= 1e-8 && wilks <= 1e-8,
        format!("max |D h - xi| = {fisher:.2e}, max |2L - |xi|^2| = {wilks:.2e} over {} replications", records.len()),
    )
}

fn bound_evaluators() -> Verdict {
    let mut rng = stream_rng(2, 0, StreamTag::Synthetic);
    let mut worst_err = 0.0f64;
    for _ in 0..100 {
        let (x, p, g, nu) =
            (rng.random_range(0.0..150.0), rng.random_range(1..6usize), rng.random_range(3.0..40.0), 1.0);
        let got = err_bound(x, p, g, nu).unwrap().value;
        let q = if p == 1 { 2.7 } else { 2.0 * p as f64 };
        let want = oracles::err_bound(x, q, g * nu);
        worst_err = worst_err.max((got - want).abs() / want);
    }
    let mut worst_tail = 0.0f64;
    let mut tails = 0;
    while tails < 100 {
        let p = rng.random_range(1..5usize);
        let a = DMatrix::from_fn(p, p, |_, _| normal(&mut rng));
        let b = &a * a.transpose() + DMatrix::identity(p, p) * 0.2;
        let b = &b / b.clone().symmetric_eigen().eigenvalues.max() * rng.random_range(0.3..1.4);
        let g = rng.random_range(5.0..40.0);
        let x = rng.random_range(0.0..400.0);
        let Ok(tail) = spectral_stats(&Spd::identity(p), &Spd::new(b.clone()).unwrap(), 1.0, g) else { continue };
        let want = oracles::quad_tail(&b, g, x);
        worst_tail = worst_tail.max((quad_tail(x, &tail).z - want).abs() / want.max(1.0));
        tails += 1;
    }
    let spot_err = err_bound(1.3, 1, 10.0, 1.0).unwrap().value;
    let i2 = Spd::identity(2);
    let spot_tail = quad_tail(1.0, &spectral_stats(&i2, &i2, 1.0, 10.0).unwrap()).z;
    verdict(
        worst_err <= 1e-12 && worst_tail <= 1e-12 && (spot_err - 9.0).abs() <= 1e-12 && (spot_tail - 8.0).abs() <= 1e-12,
        format!("max rel. deviation zq {worst_err:.1e}, z {worst_tail:.1e}; zq(1.3, 2.7; 10) = {spot_err}, z(1, I2) = {spot_tail}"),
    )
}

fn random_spd(rng: &mut impl Rng, p: usize) -> Spd {
    let a = DMatrix::from_fn(p, p, |_, _| normal(rng));
    Spd::new(&a * a.transpose() + DMatrix::identity(p, p) * 0.3).unwrap()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

fn matrix_gap_ensemble() -> Verdict {
    const SLACK: f64 = 1e-9;
    let mut rng = stream_rng(3, 0, StreamTag::Synthetic);
    let mut violations = [0usize; 4];
    let mut scores = 0usize;
    for _ in 0..500 {
        let p = rng.random_range(1..=5usize);
        let (d2, v2) = (random_spd(&mut rng, p), random_spd(&mut rng, p));
        let a = identifiability_constant(&d2, &v2).unwrap();
        let delta: f64 = rng.random_range(0.0..0.5);
        let omega = rng.random_range(0.0..0.95) * (1.0 - delta) / (a * a);
        let (tau, alpha) = tau_alpha(delta, omega, a).unwrap();
        let br = bracket_from(&d2, &v2, delta, omega);
        let scale = 1.0 + d2.max_eigenvalue();
        violations[0] += usize::from(min_eig(&(&br.db2 - d2.matrix() * (1.0 - tau))) < -SLACK * scale);
        violations[1] += usize::from(min_eig(&(d2.matrix() * (1.0 + tau) - &br.ds2)) < -SLACK * scale);
        let db = Spd::new(br.db2.clone()).unwrap().sqrt();
        let gap = DMatrix::identity(p, p) - &db * Spd::new(br.ds2.clone()).unwrap().inverse().unwrap() * &db;
        violations[2] += usize::from(gap.symmetric_eigen().eigenvalues.amax() > alpha + SLACK);
        let dinv = d2.inv_sqrt().unwrap();
        for _ in 0..1000 {
            let grad = DVector::from_fn(p, |_, _| normal(&mut rng));
            let xi2 = (&dinv * &grad).norm_squared();
            let (xf, xs) = bracket_score(&br, &grad).unwrap();
            violations[3] += usize::from(xf.norm_squared() - xs.norm_squared() > alpha * xi2 + SLACK * (1.0 + xi2));
            scores += 1;
        }
    }
    verdict(
        violations.iter().all(|&v| v == 0),
        format!("violations [lower, upper, gap norm, score gap] = {violations:?} over 500 pairs, {scores} scores"),
    )
}

fn quadratic_form_tail() -> Verdict {
    let i2 = Spd::identity(2);
    let tail = spectral_stats(&i2, &i2, 1.0, 10.0).unwrap();
    let draws = synthetic_xi_norms(&i2, 100_000, 4);
    let reports = check_quad_tail("synthetic", &draws, &tail, &[1.0, 2.0, 3.0]);
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sigma = sd / n.sqrt();
    let rates: Vec<String> = reports[..3]
        .iter()
        .map(|r| {
            format!(
                "x={}: {:.5} <= {:.4}",
                r.x.unwrap(),
                r.empirical,
                three_sigma(2.0 * (-r.x.unwrap()).exp(), draws.len())
            )
        })
        .collect();
    let tails_ok = reports[..3].iter().all(|r| r.empirical <= three_sigma(2.0 * (-r.x.unwrap()).exp(), draws.len()));
    verdict(
        tails_ok && (mean - 2.0).abs() <= 3.0 * sigma,
        format!("{}; mean |xi|^2 = {mean:.4} (3 sigma = {:.4})", rates.join(", "), 3.0 * sigma),
    )
}

fn bracketing_and_error_tail() -> Verdict {
    let model = glm(logistic_design(), GlmKind::Logistic, &[0.3, -0.8]);
    let scenario = Scenario::new(model, spec(1000, 1)).unwrap();
    let records = run_replications(&scenario, Execution::Auto);
    let reports = check_bracketing(&records, &scenario, 2.0);
    let (sandwich, tail) = (&reports[0], &reports[1]);
    verdict(
        sandwich.violations == 0 && tail.status == CheckStatus::Pass,
        format!(
            "r = {:.3} ({:?}), sandwich violations {}/{}, error-tail rate {:.4} vs limit {:.4} ({} non-converged)",
            scenario.r(),
            scenario.radius.source,
            sandwich.violations,
            sandwich.included,
            tail.empirical,
            three_sigma((-2f64).exp(), tail.included),
            sandwich.excluded
        ),
    )
}

fn concentration_for(model: Model, seed: u64) -> (bool, String) {
    let scenario = Scenario::new(model, spec(1000, seed)).unwrap();
    let conc = match geometry_concentration(&scenario.geometry, 2.0) {
        Ok(c) => c,
        Err(e) => return (false, format!("no radius: {e}")),
    };
    if !conc.feasible {
        return (false, format!("r0 infeasible: {}", conc.reason.unwrap_or_default()));
    }
    let records = run_replications(&scenario, Execution::Auto);
    let rep = check_concentration(&records, &conc, 2.0);
    (
        rep.status == CheckStatus::Pass,
        format!(
            "r0 = {:.3}, P(|V h| > r0) = {:.4} vs limit {:.4}",
            conc.r0,
            rep.empirical,
            three_sigma((-2f64).exp(), rep.included)
        ),
    )
}

fn concentration() -> Verdict {
    let (a, da) = concentration_for(glm(logistic_design(), GlmKind::Logistic, &[0.3, -0.8]), 21);
    let (b, db) = concentration_for(misspecified_logistic(), 2);
    verdict(a && b, format!("in-family {da}; misspecified {db}"))
}

fn wilks_asymptotics() -> Verdict {
    let model = glm(normal_design(1000, 2, 5), GlmKind::Logistic, &[0.3, -0.8]);
    let star = compute_target(&model).unwrap().vector();
    let opts = FitOptions::default();
    let stats: Vec<Option<f64>> = map_indexed(2000, Execution::Auto, |k| {
        let y = model.sample_with(&mut stream_rng(31, k as u64, StreamTag::Data));
        let fit = fit_with_target(&model, &y, &star, &opts).ok()?;
        fit.converged.then(|| 2.0 * fit.excess.expect("target supplied"))
    });
    let mut t: Vec<f64> = stats.iter().flatten().copied().collect();
    t.sort_by(f64::total_cmp);
    let n = t.len() as f64;
    let ks = t
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = 1.0 - (-v / 2.0).exp();
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    verdict(ks <= 0.05, format!("KS distance {ks:.4} over {} converged fits of 2000", t.len()))
}

fn scaling_family(kind: GlmKind) -> Vec<(usize, usize, Vec<ReplicationRecord>)> {
    [2usize, 4, 8]
        .iter()
        .map(|&p| {
            let n = 50 * p;
            let mut theta = vec![0.2];
            theta.extend((1..p).map(|j| if j % 2 == 0 { 0.5 } else { -0.5 } / ((p - 1) as f64).sqrt()));
            let model = glm(normal_design(n, p, 40 + p as u64), kind, &theta);
            let scenario = Scenario::new(model, spec(500, 50 + p as u64)).unwrap();
            (p, n, run_replications(&scenario, Execution::Auto))
        })
        .collect()
}

fn dimension_scaling() -> Verdict {
    let (logistic, rows) = check_dimension_scaling(&scaling_family(GlmKind::Logistic));
    let (_, control) = check_dimension_scaling(&scaling_family(GlmKind::Gaussian));
    let control_max = control.iter().map(|r| r.median_wilks_gap.max(r.median_fisher_residual)).fold(0.0, f64::max);
    let per_p: Vec<String> =
        rows.iter().map(|r| format!("p={}: {:.4}", r.p, r.median_wilks_gap / r.p as f64)).collect();
    verdict(
        logistic.status == CheckStatus::Pass && control_max <= 1e-9,
        format!("median |2L - |xi|^2| / p {}; gaussian control medians <= {control_max:.1e}", per_p.join(", ")),
    )
}

/// Median Fisher residual over `C(r)`, with `r` shared across sample sizes so `D_flat` is comparable.
fn lad_fisher_medians(sizes: &[(usize, u64)]) -> (f64, Vec<(f64, usize)>) {
    let auto: Vec<Scenario> = sizes
        .iter()
        .map(|&(m, seed)| Scenario::new(lad_laplace(orthonormal(2, m), &[1.0, -0.5]), spec(300, seed)).unwrap())
        .collect();
    let r = auto.iter().map(|s| s.radius.r).fold(f64::INFINITY, f64::min);
    let out = auto
        .into_iter()
        .map(|s| {
            let run = RunSpec { r: RadiusChoice::Value(r), ..s.spec.clone() };
            let scenario = Scenario::with_geometry(s.model, run, s.geometry).unwrap();
            let records = run_replications(&scenario, Execution::Auto);
            let inside: Vec<f64> = records.iter().filter(|r| r.in_c()).map(|r| r.fisher_residual).collect();
            let count = inside.len();
            (median(inside), count)
        })
        .collect();
    (r, out)
}

fn lad_pipeline() -> Verdict {
    let model = lad_laplace(orthonormal(2, 50), &[1.0, -0.5]);
    let geo = LocalGeometry::compute(&model, &GeometryOptions::default()).unwrap();
    let eye = DMatrix::<f64>::identity(2, 2);
    let d_err = (geo.d2.matrix() - &eye * 25.0).amax();
    let v_err = (geo.v2.matrix() - &eye * 12.5).amax();
    let a_err = (geo.a - 0.5f64.sqrt()).abs();

    let mut rng = stream_rng(9, 0, StreamTag::Synthetic);
    let opts = FitOptions::default();
    let (mut instances, mut mismatches) = (0, 0);
    while instances < 500 {
        let n = rng.random_range(2..=12usize);
        let p = rng.random_range(1..=2usize);
        if n < p {
            continue;
        }
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| if p == 1 { vec![1.0] } else { vec![1.0, normal(&mut rng)] }).collect();
        let Ok(design) = Design::from_rows(&rows) else { continue };
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = lad_objective(&design, &y, &solve_lad(&design, &y, &opts));
        let best = oracles::lad_vertex(&design, &y);
        mismatches += usize::from(got > best + 1e-6 * (1.0 + best));
        instances += 1;
    }

    let (r, medians) = lad_fisher_medians(&[(100, 61), (1000, 62)]);
    let [(small, n_small), (large, n_large)] = medians[..] else { unreachable!() };
    verdict(
        d_err <= 1e-6 && v_err <= 1e-6 && a_err <= 1e-6 && mismatches == 0 && large < small,
        format!(
            "|D^2 - 25I| = {d_err:.1e}, |V^2 - 12.5I| = {v_err:.1e}, |a - 0.70711| = {a_err:.1e}; \
             vertex mismatches {mismatches}/{instances}; median Fisher residual at r = {r:.3}: n=200 {small:.4} ({n_small} in C), \
             n=2000 {large:.4} ({n_large} in C)"
        ),
    )
}

fn reproducibility() -> Verdict {
    let tmp = tempfile::TempDir::new().unwrap();
    let cfg = json!({
        "model": {
            "class": "glm", "kind": "logistic", "n": 300, "p": 2,
            "design": { "source": "standard_normal", "seed": 2, "intercept": true },
            "truth": { "kind": "in_family", "theta": [0.2, 0.7] }
        },
        "run": { "seed": 13, "replications": 200, "x_levels": [2.0], "r": "auto" }
    });
    let path = tmp.path().join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let runs: [(&str, &[&str]); 3] = [("a", &["--workers", "1"]), ("b", &["--workers", "4"]), ("c", &[])];
    let mut codes = Vec::new();
    for (dir, extra) in runs {
        let out = tmp.path().join(dir);
        let mut args = vec!["fsmle", "verify", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        codes.push(cli::run(args));
    }
    let mut identical = true;
    for file in ["records.csv", "plot.csv", "summary.json"] {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap_or_default();
        for dir in ["b", "c"] {
            identical &= !a.is_empty() && a == std::fs::read(tmp.path().join(dir).join(file)).unwrap_or_default();
        }
    }
    let same_code = codes.windows(2).all(|w| w[0] == w[1]);
    verdict(
        identical && same_code,
        format!("exit codes {codes:?}; outputs byte-identical for workers 1, 4, default: {identical}"),
    )
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if filter.as_deref().is_some_and(|f| !"acceptance".contains(f) && !f.contains("acceptance")) {
        return;
    }
    let results = [
        criterion(1, "exact quadratic case", 10.0, exact_quadratic_case),
        criterion(2, "bound evaluators vs oracle", 10.0, bound_evaluators),
        criterion(3, "matrix-gap ensemble", 30.0, matrix_gap_ensemble),
        criterion(4, "quadratic-form tail", 10.0, quadratic_form_tail),
        criterion(5, "bracketing and error tail", 120.0, bracketing_and_error_tail),
        criterion(6, "concentration", 120.0, concentration),
        criterion(7, "Wilks asymptotics", 180.0, wilks_asymptotics),
        criterion(8, "dimension scaling", 300.0, dimension_scaling),
        criterion(9, "LAD pipeline", 180.0, lad_pipeline),
        criterion(10, "reproducibility", 120.0, reproducibility),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
