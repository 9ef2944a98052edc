use std::io::Write;

use super::{CheckReport, ReplicationRecord};

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn comment<W: Write>(out: &mut W, header: Option<&str>) -> std::io::Result<()> {
    if let Some(h) = header {
        for line in h.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(())
}

/// One row per record, stable column order. `header` lines are written first as `# ` comments.
pub fn write_records_csv<W: Write>(
    mut out: W,
    records: &[ReplicationRecord],
    header: Option<&str>,
) -> Result<(), csv::Error> {
    comment(&mut out, header)?;
    let p = records.first().map_or(0, |r| r.theta_hat.len());
    let mut w = csv::Writer::from_writer(out);
    let mut cols: Vec<String> = [
        "rep",
        "converged",
        "status",
        "in_locality",
        "lower_solution_local",
        "v_dist",
        "excess",
        "xi_norm2",
        "xi_flat_norm2",
        "xi_sharp_norm2",
        "err_upper_emp",
        "err_lower_emp",
        "err_upper_raw",
        "err_lower_raw",
        "sandwich_gap",
        "fisher_residual",
        "fisher_residual_plain",
        "wilks_gap",
        "spread",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..p).map(|j| format!("theta_hat_{j}")));
    cols.extend((0..p).map(|j| format!("xi_{j}")));
    w.write_record(&cols)?;
    for r in records {
        let status = r.status.map_or(String::new(), |s| {
            serde_json::to_value(s).map(|v| v.as_str().unwrap_or("").to_string()).unwrap_or_default()
        });
        let mut row = vec![
            r.rep.to_string(),
            r.converged.to_string(),
            status,
            r.in_locality.to_string(),
            r.lower_solution_local.to_string(),
            num(r.v_dist),
            num(r.excess),
            num(r.xi_norm2),
            num(r.xi_flat_norm2),
            num(r.xi_sharp_norm2),
            num(r.err_upper_emp),
            num(r.err_lower_emp),
            num(r.err_upper_raw),
            num(r.err_lower_raw),
            num(r.sandwich_gap),
            num(r.fisher_residual),
            num(r.fisher_residual_plain),
            num(r.wilks_gap),
            num(r.spread),
        ];
        row.extend(r.theta_hat.iter().map(|v| num(*v)));
        row.extend(r.xi.iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Long format `check, x, empirical, bound, ci_lo, ci_hi, status`.
pub fn write_plot_csv<W: Write>(mut out: W, checks: &[CheckReport], header: Option<&str>) -> Result<(), csv::Error> {
    comment(&mut out, header)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["check", "x", "empirical", "bound", "ci_lo", "ci_hi", "status"])?;
    for c in checks {
        let status = serde_json::to_value(c.status).map(|v| v.as_str().unwrap_or("").to_string()).unwrap_or_default();
        w.write_record([
            c.name.clone(),
            c.x.map_or(String::new(), num),
            num(c.empirical),
            num(c.bound),
            num(c.ci_lo),
            num(c.ci_hi),
            status,
        ])?;
    }
    w.flush()?;
    Ok(())
}
