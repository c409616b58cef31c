//! Tables and plots rendered from the artifacts of a finished run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{io_err, AirError, Result};
use crate::eval::EvalReport;
use crate::train::EpochMetrics;

/// Parses a metrics file with one JSON record per line.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    if !path.exists() {
        return Err(AirError::MissingArtifact(format!(
            "{} not found",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AirError::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect::<Result<Vec<EpochMetrics>>>()?;
    if records.is_empty() {
        return Err(AirError::MissingArtifact(format!(
            "{} has no records",
            path.display()
        )));
    }
    Ok(records)
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,mu,omega,acl_loss,sir,air,total\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.epoch, m.lr, m.mu, m.omega, m.acl_loss, m.sir, m.air, m.total
        );
    }
    out
}

/// One row per evaluated protocol: standard, robust and mean corruption accuracy.
pub fn results_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("dataset,protocol,standard_acc,robust_acc,corruption_mean\n");
    for r in reports {
        let cs = r
            .corruption_mean()
            .map(|v| v.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.dataset, r.protocol, r.standard_acc, r.robust_acc, cs
        );
    }
    out
}

const WIDTH: f64 = 640.0;
const PANEL: f64 = 220.0;
const MARGIN: f64 = 48.0;

fn polyline(out: &mut String, xs: &[f64], ys: &[f64], top: f64, color: &str) {
    let (lo, hi) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x_max = xs.last().copied().unwrap_or(0.0).max(1.0);
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let px = MARGIN + x / x_max * (WIDTH - 2.0 * MARGIN);
            let py = top + PANEL - (y - lo) / span * PANEL;
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
}

fn panel(out: &mut String, top: f64, title: &str, xs: &[f64], series: &[(&str, &str, Vec<f64>)]) {
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{top}" width="{}" height="{PANEL}" fill="none" stroke="#999"/>"##,
        WIDTH - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-size="14">{title}</text>"#,
        top - 8.0
    );
    for (i, (name, color, ys)) in series.iter().enumerate() {
        polyline(out, xs, ys, top, color);
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name} [{lo:.4}, {hi:.4}]</text>"#,
            WIDTH - MARGIN - 220.0,
            top + 16.0 + 14.0 * i as f64
        );
    }
}

/// Two panels over epochs, each series scaled to its own range: the total
/// and contrastive losses, then the two regularizers.
pub fn loss_curve_svg(metrics: &[EpochMetrics]) -> String {
    let xs: Vec<f64> = metrics.iter().map(|m| m.epoch as f64).collect();
    let col = |f: fn(&EpochMetrics) -> f64| metrics.iter().map(f).collect::<Vec<f64>>();
    let height = 2.0 * PANEL + 3.0 * MARGIN;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    out.push('\n');
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(
        &mut out,
        MARGIN,
        "objective per epoch",
        &xs,
        &[
            ("total", "#1f77b4", col(|m| m.total)),
            ("acl_loss", "#ff7f0e", col(|m| m.acl_loss)),
        ],
    );
    panel(
        &mut out,
        2.0 * MARGIN + PANEL,
        "regularizers per epoch",
        &xs,
        &[
            ("sir", "#2ca02c", col(|m| m.sir)),
            ("air", "#d62728", col(|m| m.air)),
        ],
    );
    out.push_str("</svg>\n");
    out
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub results_csv: Option<PathBuf>,
    pub loss_curve: PathBuf,
}

/// Renders the report of the run in `run_dir` into `out_dir`. Evaluation
/// reports are picked up from `eval*.json` files beside the metrics.
pub fn write_report(run_dir: &Path, out_dir: &Path) -> Result<ReportFiles> {
    let metrics = read_metrics(&run_dir.join("metrics.jsonl"))?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, body: String| -> Result<PathBuf> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(io_err(&p))?;
        Ok(p)
    };
    let mut eval_paths: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .map_err(io_err(run_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("eval") && name.ends_with(".json")
        })
        .collect();
    eval_paths.sort();
    let reports = eval_paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| AirError::Format {
                path: p.clone(),
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<EvalReport>>>()?;
    Ok(ReportFiles {
        metrics_csv: write("metrics.csv", metrics_csv(&metrics))?,
        results_csv: if reports.is_empty() {
            None
        } else {
            Some(write("results.csv", results_csv(&reports))?)
        },
        loss_curve: write("loss_curve.svg", loss_curve_svg(&metrics))?,
    })
}
