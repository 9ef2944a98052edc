//! Command-line front end.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 configuration error,
//! 3 non-convergence, 4 geometry failure, 5 failed check.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

pub use config::{ClassName, Config, ConfigError, DesignConfig, ModelConfig, OracleConfig, OutputConfig, OutputFormat};

use crate::bounds::{bounds_report, geometry_concentration};
use crate::estimation::{excess, fit_qmle, EstimationError};
use crate::exec::Execution;
use crate::geometry::{compute_target, GeometryError, LocalGeometry};
use crate::models::{Model, ModelError};
use crate::rng::{stream_rng, StreamTag};
use crate::verify::{run_checks, run_replications, write_plot_csv, write_records_csv, Scenario, VerifyError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;
pub const EXIT_GEOMETRY: i32 = 4;
pub const EXIT_CHECK_FAILURE: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "fsmle", version, about = "Quasi-MLE with finite-sample bracketing bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample one dataset and fit the quasi-MLE.
    Estimate(Invocation),
    /// Target, information matrices, tail constants and moduli tables.
    Geometry(Invocation),
    /// Bound quantities at one deviation level.
    Bounds(Invocation),
    /// Monte Carlo replications and every applicable check.
    Verify(Invocation),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Invocation {
    #[arg(long)]
    pub config: PathBuf,
    /// Deviation level; defaults to the first entry of `run.x_levels`.
    #[arg(long)]
    pub x: Option<f64>,
    /// Replication workers; defaults to every available core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure carrying its exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_CONFIG, e.to_string())
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::RankDeficient { .. } | ModelError::Linalg(_) => Failure::new(EXIT_GEOMETRY, e.to_string()),
        ModelError::Io(_)
        | ModelError::InvalidSpec(_)
        | ModelError::Domain(_)
        | ModelError::DensityUnavailable { .. } => Failure::new(EXIT_CONFIG, e.to_string()),
    }
}

fn geometry_failure(e: GeometryError) -> Failure {
    Failure::new(EXIT_GEOMETRY, e.to_string())
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_IO, format!("cannot write {}: {e}", path.display()))
}

type Handler = fn(&Config, &Invocation) -> Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (inv, cmd): (&Invocation, Handler) = match &cli.command {
        Command::Estimate(i) => (i, cmd_estimate),
        Command::Geometry(i) => (i, cmd_geometry),
        Command::Bounds(i) => (i, cmd_bounds),
        Command::Verify(i) => (i, cmd_verify),
    };
    let result = Config::load(&inv.config).map_err(Failure::from).and_then(|cfg| cmd(&cfg, inv));
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn out_dir(cfg: &Config, inv: &Invocation) -> Result<PathBuf, Failure> {
    let dir = inv.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

fn wants(cfg: &Config, f: OutputFormat) -> bool {
    cfg.output.formats.contains(&f)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_failure(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_failure(&path, e))
}

/// `# config: ...` and `# seed: ...` lines for CSV outputs.
fn csv_header(cfg: &Config) -> String {
    format!(
        "config: {}\nseed: {}",
        serde_json::to_string(&cfg.to_json_value()).unwrap_or_default(),
        cfg.run.master_seed
    )
}

fn deviation_level(cfg: &Config, inv: &Invocation) -> Result<f64, Failure> {
    let x = inv.x.unwrap_or(cfg.run.x_levels[0]);
    if !(x > 0.0 && x.is_finite()) {
        return Err(Failure::new(EXIT_CONFIG, format!("--x must be positive, got {x}")));
    }
    Ok(x)
}

fn build(cfg: &Config) -> Result<Model, Failure> {
    cfg.build_model().map_err(model_failure)
}

/// Fits one dataset drawn from replication stream 0 of `run.seed`.
pub fn cmd_estimate(cfg: &Config, inv: &Invocation) -> Result<i32, Failure> {
    let model = build(cfg)?;
    let y = model.sample_with(&mut stream_rng(cfg.run.master_seed, 0, StreamTag::Data));
    let mut fit = fit_qmle(&model, &y, &cfg.run.fit).map_err(|e| match e {
        EstimationError::InfeasibleStart(m) => Failure::new(EXIT_CONFIG, format!("run.fit.start: {m}")),
        EstimationError::Model(m) => Failure::new(EXIT_NON_CONVERGENCE, m.to_string()),
    })?;
    let (target, target_error) = match compute_target(&model) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    if let Some(t) = &target {
        fit.excess = excess(&model, &y, &fit.theta(), &t.vector()).ok();
    }
    let dir = out_dir(cfg, inv)?;
    if wants(cfg, OutputFormat::Json) {
        let doc = json!({
            "config": cfg.to_json_value(),
            "seed": cfg.run.master_seed,
            "model": model.label(),
            "fit": fit,
            "target": target,
            "target_error": target_error,
        });
        write_json(&dir, "fit.json", &doc)?;
    }
    if wants(cfg, OutputFormat::Csv) {
        let path = dir.join("fit.csv");
        let write = || -> Result<(), Box<dyn std::error::Error>> {
            let mut buf = Vec::new();
            for line in csv_header(cfg).lines() {
                buf.extend_from_slice(format!("# {line}\n").as_bytes());
            }
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["index", "theta_hat", "theta_star"])?;
            for (j, v) in fit.theta_hat.iter().enumerate() {
                let star = target.as_ref().map_or(String::new(), |t| t.theta[j].to_string());
                w.write_record([j.to_string(), v.to_string(), star])?;
            }
            fs::write(&path, w.into_inner()?)?;
            Ok(())
        };
        write().map_err(|e| io_failure(&path, e))?;
    }
    if fit.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("fit did not converge: {:?}", fit.status);
        Ok(EXIT_NON_CONVERGENCE)
    }
}

fn geometry_of(cfg: &Config, model: &Model) -> Result<LocalGeometry, Failure> {
    LocalGeometry::compute(model, &cfg.run.geometry).map_err(geometry_failure)
}

pub fn cmd_geometry(cfg: &Config, inv: &Invocation) -> Result<i32, Failure> {
    let model = build(cfg)?;
    let geo = geometry_of(cfg, &model)?;
    let dir = out_dir(cfg, inv)?;
    if wants(cfg, OutputFormat::Json) {
        let doc = json!({ "config": cfg.to_json_value(), "seed": cfg.run.master_seed, "geometry": geo });
        write_json(&dir, "geometry.json", &doc)?;
    }
    if wants(cfg, OutputFormat::Csv) {
        let path = dir.join("moduli.csv");
        let write = || -> Result<(), Box<dyn std::error::Error>> {
            let mut buf = Vec::new();
            for line in csv_header(cfg).lines() {
                buf.extend_from_slice(format!("# {line}\n").as_bytes());
            }
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["r", "delta", "rho", "b"])?;
            let m = &geo.moduli;
            for (j, &r) in m.radii.iter().enumerate() {
                w.write_record([
                    r.to_string(),
                    m.delta_at(r).to_string(),
                    m.rho_at(r).to_string(),
                    m.b[j].to_string(),
                ])?;
            }
            fs::write(&path, w.into_inner()?)?;
            Ok(())
        };
        write().map_err(|e| io_failure(&path, e))?;
    }
    Ok(EXIT_OK)
}

/// Infeasible radii and inapplicable bounds are reported in the JSON, not as failures.
pub fn cmd_bounds(cfg: &Config, inv: &Invocation) -> Result<i32, Failure> {
    let x = deviation_level(cfg, inv)?;
    let model = build(cfg)?;
    let geo = geometry_of(cfg, &model)?;
    let report = bounds_report(&geo, x, cfg.run.r.value());
    let concentration = match geometry_concentration(&geo, x) {
        Ok(c) => json!({
            "r0": c.r0,
            "feasible": c.feasible,
            "reason": c.reason,
            "probability": c.guarantee,
            "guarantee": format!("P(||V(theta_tilde - theta*)|| > r0) <= e^-{x}"),
            "schedule": c.schedule,
        }),
        Err(e) => json!({ "feasible": false, "reason": e.to_string() }),
    };
    let dir = out_dir(cfg, inv)?;
    if wants(cfg, OutputFormat::Json) {
        let doc = json!({
            "config": cfg.to_json_value(),
            "seed": cfg.run.master_seed,
            "x": x,
            "err_bound_applicable": report.err_bound.is_some(),
            "concentration": concentration,
            "bounds": report,
        });
        write_json(&dir, "bounds.json", &doc)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_verify(cfg: &Config, inv: &Invocation) -> Result<i32, Failure> {
    let mut cfg = cfg.clone();
    if inv.x.is_some() {
        cfg.run.x_levels = vec![deviation_level(&cfg, inv)?];
    }
    let model = build(&cfg)?;
    let geo = geometry_of(&cfg, &model)?;
    let scenario = Scenario::with_geometry(model, cfg.run.clone(), geo).map_err(|e| match e {
        VerifyError::InvalidScenario(m) => Failure::new(EXIT_CONFIG, m),
        other => Failure::new(EXIT_GEOMETRY, other.to_string()),
    })?;
    let exec = Execution::with_workers(inv.workers);
    let records = run_replications(&scenario, exec);
    let summary = run_checks(&scenario, &records);
    let dir = out_dir(&cfg, inv)?;
    let header = csv_header(&cfg);
    if wants(&cfg, OutputFormat::Csv) {
        let path = dir.join("records.csv");
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &records, Some(&header)).map_err(|e| io_failure(&path, e))?;
        fs::write(&path, buf).map_err(|e| io_failure(&path, e))?;
        let path = dir.join("plot.csv");
        let mut buf = Vec::new();
        write_plot_csv(&mut buf, &summary.checks, Some(&header)).map_err(|e| io_failure(&path, e))?;
        fs::write(&path, buf).map_err(|e| io_failure(&path, e))?;
    }
    if wants(&cfg, OutputFormat::Json) {
        let doc = json!({ "config": cfg.to_json_value(), "seed": cfg.run.master_seed, "summary": summary });
        write_json(&dir, "summary.json", &doc)?;
    }
    for c in &summary.checks {
        eprintln!("{:<28} {:?}", c.name, c.status);
    }
    Ok(if summary.all_passed() { EXIT_OK } else { EXIT_CHECK_FAILURE })
}
