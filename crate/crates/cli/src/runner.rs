//! Experiment execution and report writing: results.csv (pinned schema),
//! report.json, effective_config.json, and optional gnuplot tables.

use std::fmt::Write as _;
use std::path::Path;

use levy_fbsde::experiments::{
    backward_rate_sweep, forward_rate_sweep, holder_run, run_single, schedule_sweep, RunSpec,
};
use levy_fbsde::levy::make_truncation;
use levy_fbsde::report::{fmt_g17, render_csv, Row, CSV_HEADER};

use crate::config::{ExperimentConfig, ExperimentKind};

struct Outputs {
    rows: Vec<Row>,
    /// `(file stem, (h, e) pairs)` for gnuplot log-log tables
    rate_tables: Vec<(String, Vec<(f64, f64)>)>,
    /// extra holder table: `(gap, mean_sq, ratio_to_prev)`
    holder_table: Option<Vec<(f64, f64, f64)>>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<(), String> {
    let outputs = execute(cfg)?;
    write_reports(cfg, &outputs)
}

fn spec_from(cfg: &ExperimentConfig) -> Result<RunSpec, String> {
    let mut spec = RunSpec::new(cfg.m, cfg.seed);
    spec.x0 = cfg.x0;
    spec.horizon = cfg.grid.horizon;
    spec.basis = cfg.basis.build();
    spec.kernel = cfg.gamma_kernel.build();
    spec.resamples = cfg.bootstrap;
    Ok(spec)
}

fn execute(cfg: &ExperimentConfig) -> Result<Outputs, String> {
    let model = cfg.model.build()?;
    let coeffs = cfg.coefficients.build();
    let spec = spec_from(cfg)?;
    let n_values = cfg.n_values()?;
    let eps_values = cfg.eps_for(&n_values)?;
    let fail = |stage: &str, e: levy_fbsde::Error| format!("experiment `{stage}`: {e}");

    let mut rows = Vec::new();
    let mut rate_tables = Vec::new();
    let mut holder_table = None;

    match cfg.experiment {
        ExperimentKind::Solve => {
            let id = "solve";
            for scheme in cfg.scheme.kinds() {
                for (&n, &eps) in n_values.iter().zip(cycle(&eps_values, n_values.len())) {
                    let (view, run) =
                        run_single(&model, &coeffs, &spec, n, eps, scheme, false, false)
                            .map_err(|e| fail(&format!("{id} {} n={n}", scheme.name()), e))?;
                    for (kind, est) in [
                        ("y0", run.solution.y0),
                        ("z0", run.solution.z0),
                        ("gamma0", run.solution.gamma0),
                    ] {
                        rows.push(make_row(
                            id,
                            scheme.name(),
                            n,
                            eps,
                            view.sigma_eps(),
                            cfg,
                            kind,
                            est.value,
                            est.se,
                            None,
                        ));
                    }
                }
            }
        }
        ExperimentKind::RatesForward => {
            let id = "rates-forward";
            let n = n_values[0];
            let res = forward_rate_sweep(
                &model,
                &coeffs,
                &spec,
                &eps_values,
                n,
                cfg.reference.refine,
                cfg.reference.delta_div,
            )
            .map_err(|e| fail(id, e))?;
            let mut table = Vec::new();
            for p in &res.points {
                rows.push(make_row(
                    id,
                    "forward",
                    n,
                    p.eps,
                    p.sigma_eps,
                    cfg,
                    "err_forward",
                    p.est.value,
                    p.est.se,
                    None,
                ));
                table.push((p.sigma2, p.est.value));
            }
            rows.push(make_row(
                id,
                "forward",
                n,
                0.0,
                0.0,
                cfg,
                "rate_fit",
                res.fit.slope,
                0.0,
                Some((res.fit.slope, res.slope_lo, res.slope_hi)),
            ));
            rate_tables.push(("rates_forward_loglog".to_string(), table));
        }
        ExperimentKind::RatesBackward => {
            if cfg.is_schedule() {
                let id = "rates-backward-schedule";
                for scheme in cfg.scheme.kinds() {
                    let res = schedule_sweep(
                        &model,
                        &coeffs,
                        &spec,
                        &n_values,
                        scheme,
                        cfg.reference.refine,
                        cfg.reference.delta_div,
                        cfg.reference.m_factor,
                    )
                    .map_err(|e| fail(&format!("{id} {}", scheme.name()), e))?;
                    let mut table = Vec::new();
                    for p in &res.points {
                        rows.push(make_row(
                            id,
                            scheme.name(),
                            p.n,
                            p.eps,
                            p.sigma_eps,
                            cfg,
                            "err_n_eps",
                            p.report.combined.value,
                            p.report.combined.se,
                            None,
                        ));
                        table.push((p.n as f64, p.report.combined.value));
                    }
                    rows.push(make_row(
                        id,
                        scheme.name(),
                        0,
                        0.0,
                        0.0,
                        cfg,
                        "rate_fit",
                        res.fit.slope,
                        0.0,
                        Some((res.fit.slope, res.slope_lo, res.slope_hi)),
                    ));
                    rate_tables.push((format!("schedule_{}_loglog", scheme.name()), table));
                }
            } else {
                let id = "rates-backward";
                let eps = eps_values[0];
                let view = make_truncation(&model, eps).map_err(|e| fail(id, e))?;
                for scheme in cfg.scheme.kinds() {
                    let res = backward_rate_sweep(
                        &model,
                        &coeffs,
                        &spec,
                        eps,
                        &n_values,
                        cfg.oracle.n,
                        cfg.oracle.m_factor * cfg.m,
                        scheme,
                    )
                    .map_err(|e| fail(&format!("{id} {}", scheme.name()), e))?;
                    let mut table = Vec::new();
                    for p in &res.points {
                        rows.push(make_row(
                            id,
                            scheme.name(),
                            p.n,
                            eps,
                            view.sigma_eps(),
                            cfg,
                            "err_n",
                            p.report.combined.value,
                            p.report.combined.se,
                            None,
                        ));
                        table.push((p.n as f64, p.report.combined.value));
                    }
                    rows.push(make_row(
                        id,
                        scheme.name(),
                        0,
                        eps,
                        view.sigma_eps(),
                        cfg,
                        "rate_fit",
                        res.fit.slope,
                        0.0,
                        Some((res.fit.slope, res.slope_lo, res.slope_hi)),
                    ));
                    rate_tables.push((format!("err_n_{}_loglog", scheme.name()), table));
                }
            }
        }
        ExperimentKind::Holder => {
            let id = "holder";
            let n = n_values[0];
            let eps = eps_values[0];
            let view = make_truncation(&model, eps).map_err(|e| fail(id, e))?;
            let scheme = cfg.scheme.kinds()[0];
            let res = holder_run(&model, &coeffs, &spec, eps, n, &cfg.holder_gaps, scheme)
                .map_err(|e| fail(id, e))?;
            let mut table = Vec::new();
            let mut prev: Option<f64> = None;
            for (gap, est) in &res.increments {
                rows.push(make_row(
                    id,
                    scheme.name(),
                    n,
                    eps,
                    view.sigma_eps(),
                    cfg,
                    &format!("holder_gap_{gap:.6}"),
                    est.value,
                    est.se,
                    None,
                ));
                let ratio = prev.map(|p| est.value / p).unwrap_or(f64::NAN);
                table.push((*gap, est.value, ratio));
                prev = Some(est.value);
            }
            rows.push(make_row(
                id,
                scheme.name(),
                n,
                eps,
                view.sigma_eps(),
                cfg,
                "rate_fit",
                res.fit.slope,
                0.0,
                Some((res.fit.slope, res.slope_lo, res.slope_hi)),
            ));
            holder_table = Some(table);
        }
    }

    Ok(Outputs {
        rows,
        rate_tables,
        holder_table,
    })
}

fn cycle(eps: &[f64], n: usize) -> impl Iterator<Item = &f64> {
    // eps list either matches the sweep length or is a single fixed value
    (0..n).map(move |i| if eps.len() == 1 { &eps[0] } else { &eps[i] })
}

#[allow(clippy::too_many_arguments)]
fn make_row(
    id: &str,
    scheme: &str,
    n: usize,
    eps: f64,
    sigma_eps: f64,
    cfg: &ExperimentConfig,
    err_kind: &str,
    estimate: f64,
    se: f64,
    slope: Option<(f64, f64, f64)>,
) -> Row {
    Row {
        experiment_id: id.to_string(),
        scheme: scheme.to_string(),
        n,
        eps,
        sigma_eps,
        m: cfg.m,
        seed: cfg.seed,
        err_kind: err_kind.to_string(),
        estimate,
        se,
        slope: slope.map(|s| s.0),
        slope_lo: slope.map(|s| s.1),
        slope_hi: slope.map(|s| s.2),
    }
}

fn write_reports(cfg: &ExperimentConfig, outputs: &Outputs) -> Result<(), String> {
    let dir = Path::new(&cfg.output_dir);
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;

    let timestamp = if cfg.suppress_timestamp {
        None
    } else {
        Some(format!(
            "unix {}",
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        ))
    };
    let csv = render_csv(&outputs.rows, timestamp.as_deref());
    std::fs::write(dir.join("results.csv"), csv).map_err(|e| e.to_string())?;

    let effective = serde_json::to_string_pretty(cfg).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("effective_config.json"), &effective).map_err(|e| e.to_string())?;

    let report = serde_json::json!({
        "config": cfg,
        "csv_header": CSV_HEADER,
        "rows": outputs.rows.iter().map(row_json).collect::<Vec<_>>(),
    });
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;

    if cfg.gnuplot {
        for (stem, table) in &outputs.rate_tables {
            let mut text = String::from("# h error (log-log ready)\n");
            for (h, e) in table {
                let _ = writeln!(text, "{} {}", fmt_g17(*h), fmt_g17(*e));
            }
            std::fs::write(dir.join(format!("{stem}.dat")), text).map_err(|e| e.to_string())?;
        }
    }

    if let Some(table) = &outputs.holder_table {
        let mut text = String::from("gap,mean_sq_increment,ratio_to_prev\n");
        for (gap, mean_sq, ratio) in table {
            let ratio_s = if ratio.is_nan() {
                String::new()
            } else {
                fmt_g17(*ratio)
            };
            let _ = writeln!(text, "{},{},{}", fmt_g17(*gap), fmt_g17(*mean_sq), ratio_s);
        }
        std::fs::write(dir.join("holder.csv"), text).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn row_json(r: &Row) -> serde_json::Value {
    serde_json::json!({
        "experiment_id": r.experiment_id,
        "scheme": r.scheme,
        "n": r.n,
        "eps": r.eps,
        "sigma_eps": r.sigma_eps,
        "M": r.m,
        "seed": r.seed,
        "err_kind": r.err_kind,
        "estimate": r.estimate,
        "se": r.se,
        "slope": r.slope,
        "slope_lo": r.slope_lo,
        "slope_hi": r.slope_hi,
    })
}
