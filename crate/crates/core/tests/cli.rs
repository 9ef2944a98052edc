use std::fs;
use std::path::Path;

use fsmle::cli::{run, EXIT_CHECK_FAILURE, EXIT_CONFIG, EXIT_GEOMETRY, EXIT_NON_CONVERGENCE, EXIT_OK};
use serde_json::{json, Value};
use tempfile::TempDir;

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn invoke(cmd: &str, config: &str, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["fsmle", cmd, "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn gaussian_orthonormal() -> Value {
    json!({
        "model": {
            "class": "glm", "kind": "gaussian", "n": 100, "p": 2,
            "design": { "source": "orthonormal_replicated" },
            "truth": { "kind": "in_family", "theta": [0.5, -0.5] }
        },
        "run": { "seed": 3, "replications": 100, "x_levels": [2.0] }
    })
}

fn logistic() -> Value {
    json!({
        "model": {
            "class": "glm", "kind": "logistic", "n": 300, "p": 2,
            "design": { "source": "standard_normal", "seed": 2, "intercept": true },
            "truth": { "kind": "in_family", "theta": [0.2, 0.7] }
        },
        "run": { "seed": 9, "replications": 100, "x_levels": [2.0] }
    })
}

#[test]
fn estimate_writes_fit_and_reports_convergence() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "g.json", &gaussian_orthonormal());
    assert_eq!(invoke("estimate", &cfg, &tmp.path().join("out"), &[]), EXIT_OK);
    let fit = read_json(&tmp.path().join("out/fit.json"));
    assert_eq!(fit["fit"]["theta_hat"].as_array().unwrap().len(), 2);
    assert_eq!(fit["seed"], 3);
    assert_eq!(fit["config"]["model"]["n"], 100);
    let csv = fs::read_to_string(tmp.path().join("out/fit.csv")).unwrap();
    assert!(csv.starts_with("# config: {"));
    assert!(csv.lines().nth(1).unwrap() == "# seed: 3");
}

#[test]
fn separable_logistic_is_non_convergence() {
    let tmp = TempDir::new().unwrap();
    let cfg = json!({
        "model": {
            "class": "glm", "kind": "logistic", "n": 6, "p": 2,
            "design": { "source": "standard_normal", "seed": 1, "intercept": true },
            "truth": { "kind": "in_family", "theta": [0.0, 40.0] }
        },
        "run": { "seed": 1 }
    });
    let path = write_config(tmp.path(), "sep.json", &cfg);
    assert_eq!(invoke("estimate", &path, &tmp.path().join("out"), &[]), EXIT_NON_CONVERGENCE);
    assert_eq!(read_json(&tmp.path().join("out/fit.json"))["fit"]["converged"], false);
}

#[test]
fn config_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let mut missing = gaussian_orthonormal();
    missing["model"].as_object_mut().unwrap().remove("n");
    let path = write_config(tmp.path(), "missing.json", &missing);
    assert_eq!(invoke("estimate", &path, &tmp.path().join("o"), &[]), EXIT_CONFIG);

    let mut unknown = gaussian_orthonormal();
    unknown["run"]["replicates"] = json!(10);
    let path = write_config(tmp.path(), "unknown.json", &unknown);
    assert_eq!(invoke("geometry", &path, &tmp.path().join("o"), &[]), EXIT_CONFIG);

    let mut few = gaussian_orthonormal();
    few["run"]["replications"] = json!(10);
    let path = write_config(tmp.path(), "few.json", &few);
    assert_eq!(invoke("verify", &path, &tmp.path().join("o"), &[]), EXIT_CONFIG);

    let path = write_config(tmp.path(), "ok.json", &gaussian_orthonormal());
    assert_eq!(invoke("bounds", &path, &tmp.path().join("o"), &["--x=-1"]), EXIT_CONFIG);
    assert_eq!(run(["fsmle", "estimate"]), EXIT_CONFIG);
    assert_eq!(run(["fsmle", "verify", "--config"]), EXIT_CONFIG);
}

#[test]
fn geometry_reports_lad_and_gaussian_examples() {
    let tmp = TempDir::new().unwrap();
    let lad = json!({
        "model": {
            "class": "lad", "n": 100, "p": 2,
            "design": { "source": "orthonormal_replicated" },
            "truth": { "kind": "custom_mean", "mean": { "form": "index", "theta": [1.0, -0.5] },
                       "noise": { "law": "laplace", "scale": 1.0 } }
        }
    });
    let path = write_config(tmp.path(), "lad.json", &lad);
    assert_eq!(invoke("geometry", &path, &tmp.path().join("lad"), &[]), EXIT_OK);
    let g = read_json(&tmp.path().join("lad/geometry.json"));
    assert!((g["geometry"]["a"].as_f64().unwrap() - 0.5f64.sqrt()).abs() < 1e-6);

    let path = write_config(tmp.path(), "g.json", &gaussian_orthonormal());
    assert_eq!(invoke("geometry", &path, &tmp.path().join("g"), &[]), EXIT_OK);
    let g = read_json(&tmp.path().join("g/geometry.json"))["geometry"].clone();
    for key in ["d2", "v2"] {
        assert!((g[key][0][0].as_f64().unwrap() - 50.0).abs() < 1e-9);
        assert!((g[key][1][1].as_f64().unwrap() - 50.0).abs() < 1e-9);
        assert!(g[key][0][1].as_f64().unwrap().abs() < 1e-12);
    }
    let moduli = fs::read_to_string(tmp.path().join("g/moduli.csv")).unwrap();
    assert!(moduli.lines().any(|l| l == "r,delta,rho,b"));
}

#[test]
fn rank_deficient_design_is_a_geometry_failure() {
    let tmp = TempDir::new().unwrap();
    let rows: String = (0..20).map(|i| format!("1,{i},{}\n", 2 * i + 1)).collect();
    fs::write(tmp.path().join("x.csv"), rows).unwrap();
    let cfg = json!({
        "model": {
            "class": "glm", "kind": "gaussian", "n": 20, "p": 3,
            "design": { "source": "csv", "path": "x.csv" },
            "truth": { "kind": "in_family", "theta": [0.0, 1.0, 0.0] }
        }
    });
    let path = write_config(tmp.path(), "rank.json", &cfg);
    assert_eq!(invoke("geometry", &path, &tmp.path().join("o"), &[]), EXIT_GEOMETRY);
}

#[test]
fn bounds_are_deterministic_and_flag_inapplicable_error_bounds() {
    let tmp = TempDir::new().unwrap();
    let path = write_config(tmp.path(), "l.json", &logistic());
    assert_eq!(invoke("bounds", &path, &tmp.path().join("a"), &["--x", "2"]), EXIT_OK);
    assert_eq!(invoke("bounds", &path, &tmp.path().join("b"), &["--x", "2"]), EXIT_OK);
    let a = fs::read(tmp.path().join("a/bounds.json")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b/bounds.json")).unwrap());
    let doc: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(doc["err_bound_applicable"], true);
    assert!(doc["concentration"]["r0"].is_number());
    assert_eq!(doc["concentration"]["guarantee"], "P(||V(theta_tilde - theta*)|| > r0) <= e^-2");

    let mut weak = logistic();
    weak["run"]["geometry"] = json!({ "g1": 0.01 });
    let path = write_config(tmp.path(), "weak.json", &weak);
    assert_eq!(invoke("bounds", &path, &tmp.path().join("w"), &[]), EXIT_OK);
    let doc = read_json(&tmp.path().join("w/bounds.json"));
    assert_eq!(doc["err_bound_applicable"], false);
    assert!(doc["bounds"]["err_bound_error"].as_str().unwrap().contains("below 3"));
}

#[test]
fn verify_is_reproducible_across_workers() {
    let tmp = TempDir::new().unwrap();
    let path = write_config(tmp.path(), "g.json", &gaussian_orthonormal());
    assert_eq!(invoke("verify", &path, &tmp.path().join("one"), &["--workers", "1"]), EXIT_OK);
    assert_eq!(invoke("verify", &path, &tmp.path().join("many"), &["--workers", "4"]), EXIT_OK);
    for file in ["records.csv", "plot.csv", "summary.json"] {
        let a = fs::read(tmp.path().join("one").join(file)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("many").join(file)).unwrap(), "{file}");
    }
    let plot = fs::read_to_string(tmp.path().join("one/plot.csv")).unwrap();
    assert!(plot.lines().any(|l| l.starts_with("check,x,empirical,bound,ci_lo,ci_hi")));
}

#[test]
fn tiny_radius_fails_verification() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = logistic();
    cfg["run"]["r"] = json!(0.01);
    let path = write_config(tmp.path(), "tiny.json", &cfg);
    assert_eq!(invoke("verify", &path, &tmp.path().join("o"), &[]), EXIT_CHECK_FAILURE);
    let summary = read_json(&tmp.path().join("o/summary.json"));
    let wilks = summary["summary"]["checks"].as_array().unwrap().iter().find(|c| c["name"] == "wilks").unwrap().clone();
    assert_eq!(wilks["status"], "out_of_regime");
}
