mod common;

use common::*;
use fsmle::models::{
    glm_cumulant, Design, GlmKind, IidFamily, Marginal, MeanSpec, Model, ModelError, NoiseLaw, OracleOptions, TruthSpec,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const KINDS: [GlmKind; 4] = [GlmKind::Logistic, GlmKind::Poisson, GlmKind::Exponential, GlmKind::Gaussian];

/// Cumulants written out directly from their definitions.
fn cumulant_oracle(kind: GlmKind, w: f64) -> f64 {
    match kind {
        GlmKind::Logistic => (w.exp() + 1.0).ln(),
        GlmKind::Poisson => w.exp(),
        GlmKind::Exponential => -w.ln(),
        GlmKind::Gaussian => w * w / 2.0,
    }
}

fn kind_strategy() -> impl Strategy<Value = GlmKind> {
    prop::sample::select(KINDS.to_vec())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cumulant_derivatives_match_finite_differences(kind in kind_strategy(), w in -4.0f64..4.0) {
        let w = if kind == GlmKind::Exponential { w.abs() + 0.2 } else { w };
        let (d, d1, d2) = glm_cumulant(kind, w).unwrap();
        prop_assert!(rel_close(d, cumulant_oracle(kind, w), 1e-12));
        let h = 1e-4 * (1.0 + w.abs());
        let fd1 = (cumulant_oracle(kind, w + h) - cumulant_oracle(kind, w - h)) / (2.0 * h);
        let fd2 = (cumulant_oracle(kind, w + h) - 2.0 * cumulant_oracle(kind, w) + cumulant_oracle(kind, w - h)) / (h * h);
        prop_assert!(rel_close(d1, fd1, 1e-6), "d' {} vs {}", d1, fd1);
        prop_assert!(rel_close(d2, fd2, 1e-5), "d'' {} vs {}", d2, fd2);
    }

    #[test]
    fn cumulant_is_strictly_convex(kind in kind_strategy(), w in -20.0f64..20.0) {
        let w = if kind == GlmKind::Exponential { w.abs() + 1e-3 } else { w };
        let (_, _, d2) = glm_cumulant(kind, w).unwrap();
        prop_assert!(d2 > 0.0);
    }

    #[test]
    fn lad_loglik_is_midpoint_concave(
        a in prop::collection::vec(-3.0f64..3.0, 2),
        b in prop::collection::vec(-3.0f64..3.0, 2),
        seed in 0u64..1000,
    ) {
        let model = lad_laplace(normal_design(30, 2, 4), &[0.5, -0.5]);
        let y = model.sample_data(seed);
        let (a, b) = (v(&a), v(&b));
        let mid = (&a + &b) * 0.5;
        let lm = model.loglik(&y, &mid).unwrap();
        let avg = 0.5 * (model.loglik(&y, &a).unwrap() + model.loglik(&y, &b).unwrap());
        prop_assert!(lm >= avg - 1e-12 * (1.0 + avg.abs()));
    }

    #[test]
    fn glm_stochastic_gradient_does_not_depend_on_theta(
        kind in kind_strategy(),
        t1 in prop::collection::vec(-0.3f64..0.3, 2),
        t2 in prop::collection::vec(-0.3f64..0.3, 2),
        seed in 0u64..1000,
    ) {
        let shift = if kind == GlmKind::Exponential { 2.0 } else { 0.0 };
        let model = glm(orthonormal(2, 10), kind, &[0.2 + shift, 0.1 + shift]);
        let y = model.sample_data(seed);
        let g1 = model.stochastic_gradient(&y, &v(&[t1[0] + shift, t1[1] + shift])).unwrap();
        let g2 = model.stochastic_gradient(&y, &v(&[t2[0] + shift, t2[1] + shift])).unwrap();
        prop_assert!((g1 - &g2).amax() <= 1e-9 * (1.0 + g2.amax()));
    }

    #[test]
    fn glm_total_hessian_is_negative_semidefinite(
        kind in kind_strategy(),
        t in prop::collection::vec(-1.0f64..1.0, 3),
        seed in 0u64..1000,
    ) {
        let design = normal_design(40, 3, 11);
        let (base, theta) = if kind == GlmKind::Exponential {
            // strictly positive design keeps the natural parameter in the domain
            let rows = design.matrix().map(|x| x.abs() + 0.1);
            (Design::new(rows).unwrap(), vec![1.0 + t[0].abs(), 1.0 + t[1].abs(), 1.0 + t[2].abs()])
        } else {
            (design, t.clone())
        };
        let model = glm(base, kind, &theta);
        let y = model.sample_data(seed);
        let h = model.hessian(&y, &v(&theta)).unwrap();
        let eig = h.symmetric_eigen().eigenvalues;
        prop_assert!(eig.max() <= 1e-9 * (1.0 + eig.amax()));
    }
}

/// Central differences of a scalar function of `theta`.
fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, theta: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        theta.len(),
        (0..theta.len()).map(|j| {
            let h = 1e-5 * (1.0 + theta[j].abs());
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        }),
    )
}

fn fd_hessian(g: &dyn Fn(&DVector<f64>) -> DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
    let p = theta.len();
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let step = 1e-5 * (1.0 + theta[j].abs());
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[j] += step;
        dn[j] -= step;
        h.set_column(j, &((g(&up) - g(&dn)) / (2.0 * step)));
    }
    h
}

fn close_rel(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * (1.0 + a.amax().max(b.amax()))
}

/// 100 random `(y, theta)` pairs per model; the observation index cycles.
fn check_derivatives(model: &Model, theta_range: (f64, f64), seed: u64, smooth: bool) {
    use rand::Rng;
    let mut rng = fsmle::rng::stream_rng(seed, 0, fsmle::rng::StreamTag::Synthetic);
    let p = model.p();
    let mut checked = 0;
    for k in 0..100 {
        let i = k % model.n();
        let y = model.marginals()[i].sample(&mut rng);
        let theta = DVector::from_iterator(p, (0..p).map(|_| rng.random_range(theta_range.0..theta_range.1)));
        if !model.in_domain(&theta) {
            continue;
        }
        let f = |t: &DVector<f64>| model.obs_loglik(i, y, t).unwrap();
        let g = model.obs_gradient(i, y, &theta).unwrap();
        let fd = fd_gradient(&f, &theta);
        if !smooth {
            // skip points within a step of the absolute-value kink
            let w = model.design().unwrap().row(i).dot(&theta);
            if (y - w).abs() < 1e-3 {
                continue;
            }
        }
        assert!(close_rel(&g, &fd, 1e-4), "{}: gradient {g} vs {fd}", model.label());
        if smooth {
            let gf = |t: &DVector<f64>| model.obs_gradient(i, y, t).unwrap();
            let h = model.obs_hessian(i, y, &theta).unwrap();
            let fh = fd_hessian(&gf, &theta);
            assert!((&h - &fh).amax() <= 1e-4 * (1.0 + h.amax()), "{}: hessian {h} vs {fh}", model.label());
        }
        checked += 1;
    }
    assert!(checked >= 80, "{}: only {checked} points in the domain", model.label());
}

#[test]
fn analytic_derivatives_match_finite_differences() {
    let design = normal_design(20, 3, 5);
    for (s, kind) in KINDS.iter().enumerate() {
        if *kind == GlmKind::Exponential {
            let rows = design.matrix().map(|x| x.abs() + 0.1);
            let model = glm(Design::new(rows).unwrap(), *kind, &[1.0, 1.0, 1.0]);
            check_derivatives(&model, (0.5, 2.0), s as u64, true);
        } else {
            let model = glm(design.clone(), *kind, &[0.3, -0.2, 0.1]);
            check_derivatives(&model, (-1.0, 1.0), s as u64, true);
        }
    }
    check_derivatives(&iid(IidFamily::NormalLocationScale, 50, &[1.0, 0.3]), (-1.0, 1.0), 7, true);
    check_derivatives(&iid(IidFamily::ExponentialRate, 50, &[0.5]), (-1.0, 1.0), 8, true);
    check_derivatives(&iid(IidFamily::LogisticLocation, 50, &[0.2]), (-1.0, 1.0), 9, true);
    check_derivatives(&lad_laplace(design, &[0.3, -0.2, 0.1]), (-1.0, 1.0), 10, false);
}

#[test]
fn gaussian_orthonormal_total_hessian() {
    let model = glm(orthonormal(2, 50), GlmKind::Gaussian, &[0.0, 0.0]);
    let y = model.sample_data(1);
    for theta in [v(&[0.0, 0.0]), v(&[3.0, -7.0])] {
        let h = model.hessian(&y, &theta).unwrap();
        assert!((h + DMatrix::identity(2, 2) * 50.0).amax() < 1e-12);
    }
}

#[test]
fn logistic_obs_hessian_at_zero_is_quarter_outer_product() {
    let design = normal_design(10, 2, 3);
    let model = glm(design.clone(), GlmKind::Logistic, &[0.0, 0.0]);
    for i in 0..10 {
        let psi = design.row(i);
        let h = model.obs_hessian(i, 1.0, &v(&[0.0, 0.0])).unwrap();
        assert!((h + &psi * psi.transpose() * 0.25).amax() < 1e-15);
    }
}

#[test]
fn misspecified_custom_mean_builds() {
    let design = orthonormal(2, 20);
    let truth = TruthSpec::CustomMean {
        mean: MeanSpec::Index { theta: vec![0.3, -0.3], curvature: 0.5, link: fsmle::models::Link::Logistic },
        noise: NoiseLaw::Bernoulli,
    };
    assert!(Model::glm(design, GlmKind::Logistic, truth, None).is_ok());
}

#[test]
fn lad_residual_densities_and_median_probability() {
    let theta = [0.5, 1.0];
    let laplace = lad_laplace(orthonormal(2, 5), &theta);
    let normal = Model::lad(
        orthonormal(2, 5),
        index_truth(&theta, NoiseLaw::Normal { sd: 1.0 }),
        OracleOptions::density_default(),
    )
    .unwrap();
    let star = v(&theta);
    for i in 0..10 {
        let w = orthonormal(2, 5).row(i).dot(&star);
        assert!((laplace.response_density(i, w) - 0.5).abs() < 1e-15);
        let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((normal.response_density(i, w) - phi0).abs() < 1e-12);
        assert!((laplace.lad_b(i, &star) - 0.5).abs() < 1e-15);
        assert!((normal.lad_b(i, &star) - 0.5).abs() < 1e-12);
    }
}

#[test]
fn lad_kernel_density_for_lawless_residuals() {
    // Bernoulli contamination gives a mixture with an atom; the density falls back to a kernel estimate
    let truth = TruthSpec::Contaminated {
        base: Box::new(index_truth(&[0.0, 0.0], NoiseLaw::Normal { sd: 1.0 })),
        fraction: 0.1,
        contaminant: Marginal::Bernoulli { p: 0.5 },
    };
    let model = Model::lad(orthonormal(2, 5), truth.clone(), OracleOptions::density_default()).unwrap();
    let d = model.response_density(0, 0.0);
    assert!(d.is_finite() && d > 0.3);
    let none = Model::lad(orthonormal(2, 5), truth, OracleOptions { draws: None, seed: 1 });
    assert!(matches!(none, Err(ModelError::DensityUnavailable { .. })));
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let model = glm(normal_design(50, 2, 1), GlmKind::Poisson, &[0.1, 0.2]);
    assert_eq!(model.sample_data(42), model.sample_data(42));
    assert_ne!(model.sample_data(42), model.sample_data(43));
}

#[test]
fn gaussian_residual_mean_within_three_over_root_n() {
    let n = 100_000;
    let design = normal_design(n, 2, 9);
    let theta = [0.7, -0.4];
    let model = glm(design.clone(), GlmKind::Gaussian, &theta);
    let y = model.sample_data(3);
    let eta = design.index(&v(&theta));
    let mean = y.iter().zip(eta.iter()).map(|(a, b)| a - b).sum::<f64>() / n as f64;
    assert!(mean.abs() <= 3.0 / (n as f64).sqrt(), "residual mean {mean}");
}

#[test]
fn contamination_count_within_binomial_interval() {
    let n = 10_000;
    let truth = TruthSpec::Contaminated {
        base: Box::new(TruthSpec::CustomMean {
            mean: MeanSpec::Constant { value: 0.0 },
            noise: NoiseLaw::Normal { sd: 1.0 },
        }),
        fraction: 0.1,
        contaminant: Marginal::Normal { mean: 50.0, sd: 1.0 },
    };
    let model = Model::iid(IidFamily::NormalLocationScale, n, truth, OracleOptions::expectation_default()).unwrap();
    let (_, labels) = model.sample_labeled(17);
    let count = labels.iter().filter(|&&c| c).count() as f64;
    // 99% binomial interval: 1000 +- 2.576 sqrt(900)
    let half = 2.576 * (n as f64 * 0.1 * 0.9).sqrt();
    assert!((count - 1000.0).abs() <= half, "contaminant count {count}");
}

#[test]
fn rank_deficient_design_is_rejected() {
    let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![-1.0, -2.0]];
    assert!(matches!(Design::from_rows(&rows), Err(ModelError::RankDeficient { .. })));
}

#[test]
fn design_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    std::fs::write(&path, "1, 0.5\n0, 2\n1,-1\n").unwrap();
    let d = Design::from_csv(&path).unwrap();
    assert_eq!((d.n(), d.p()), (3, 2));
    assert_eq!(d.row(2), v(&[1.0, -1.0]));
}
