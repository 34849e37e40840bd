use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::objectives::LossValue;

pub const CSV_HEADER: &str = "step,train_accuracy,loss_total,loss_data,loss_reg,wall_ms";

/// Rounds to 9 significant digits. Values stored in a [`MetricRecord`] are
/// already rounded, so writing them with [`format_metric`] and parsing them
/// back is lossless.
fn quantize(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Shortest positional decimal that round-trips, e.g. `0.136794931`.
pub fn format_metric(x: f64) -> String {
    format!("{x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Accuracy on the training batch of this step.
    pub train_accuracy: f64,
    pub loss_total: f64,
    pub loss_data: f64,
    pub loss_reg: f64,
    /// Milliseconds since training started; 0 unless wall time is recorded.
    pub wall_ms: u64,
}

impl MetricRecord {
    pub fn new(step: u64, train_accuracy: f64, loss: LossValue, wall_ms: u64) -> Self {
        MetricRecord {
            step,
            train_accuracy: quantize(train_accuracy),
            loss_total: quantize(loss.total),
            loss_data: quantize(loss.data_term),
            loss_reg: quantize(loss.reg_term),
            wall_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mean over logged records; `None` when nothing was logged.
    pub mean_train_accuracy: Option<f64>,
    pub mean_train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub total_steps: u64,
    pub config: TrainConfig,
}

impl RunSummary {
    pub fn new(records: &[MetricRecord], test_accuracy: Option<f64>, total_steps: u64, config: TrainConfig) -> Self {
        let mean = |f: fn(&MetricRecord) -> f64| {
            (!records.is_empty()).then(|| records.iter().map(f).sum::<f64>() / records.len() as f64)
        };
        RunSummary {
            mean_train_accuracy: mean(|r| r.train_accuracy),
            mean_train_loss: mean(|r| r.loss_total),
            test_accuracy,
            total_steps,
            config,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricsFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub curves: Option<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `summary.json` and, if `plot`, `curves.svg`.
pub fn write_metrics(
    records: &[MetricRecord],
    summary: &RunSummary,
    out_dir: &Path,
    plot: bool,
) -> Result<MetricsFiles> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut csv = String::with_capacity(64 * (records.len() + 1));
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for r in records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.step,
            format_metric(r.train_accuracy),
            format_metric(r.loss_total),
            format_metric(r.loss_data),
            format_metric(r.loss_reg),
            r.wall_ms
        );
    }
    let csv_path = out_dir.join("metrics.csv");
    write_file(&csv_path, &csv)?;

    let summary_path = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&summary_path, &(json + "\n"))?;

    let curves = if plot {
        let path = out_dir.join("curves.svg");
        write_file(&path, &render_curves_svg(records))?;
        Some(path)
    } else {
        None
    };
    Ok(MetricsFiles { csv: csv_path, summary: summary_path, curves })
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || Error::Format(format!("{}: malformed row {}", path.display(), i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad());
            }
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricRecord {
                step: fields[0].parse().map_err(|_| bad())?,
                train_accuracy: real(fields[1])?,
                loss_total: real(fields[2])?,
                loss_data: real(fields[3])?,
                loss_reg: real(fields[4])?,
                wall_ms: fields[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;

fn panel(svg: &mut String, top: f64, title: &str, points: &[(f64, f64)], y_max: f64, color: &str) {
    let x_max = points.last().map_or(1.0, |p| p.0).max(1.0);
    let (left, right) = (MARGIN, PANEL_W - 20.0);
    let (upper, lower) = (top + 30.0, top + PANEL_H - 30.0);
    let sx = |x: f64| left + (right - left) * x / x_max;
    let sy = |y: f64| lower - (lower - upper) * (y / y_max).clamp(0.0, 1.0);
    let _ = writeln!(svg, r#"<text x="{left}" y="{}" font-size="14">{title}</text>"#, top + 18.0);
    let _ = writeln!(svg, r#"<path d="M{left},{upper} V{lower} H{right}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y_max:.3}</text>"#,
        left - 4.0,
        upper + 4.0
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">0</text>"#, left - 4.0, lower + 4.0);
    let _ =
        writeln!(svg, r#"<text x="{right}" y="{}" font-size="10" text-anchor="end">step {x_max}</text>"#, lower + 16.0);
    if !points.is_empty() {
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ =
            writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
    }
}

/// Training accuracy and loss against step, as a standalone SVG document.
pub fn render_curves_svg(records: &[MetricRecord]) -> String {
    let acc: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.train_accuracy)).collect();
    let loss: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.loss_total)).collect();
    let loss_max = loss.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-12);
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{}" font-family="sans-serif">"#,
        2.0 * PANEL_H
    );
    svg.push('\n');
    panel(&mut svg, 0.0, "training accuracy", &acc, 1.0, "#1f77b4");
    panel(&mut svg, PANEL_H, "training loss", &loss, loss_max, "#d62728");
    svg.push_str("</svg>\n");
    svg
}
