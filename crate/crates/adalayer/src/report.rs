//! Figure-ready CSV exports. Consumes training logs, evaluation metrics, and
//! calibration reports; emits per-layer execution ratios, training curves,
//! logit-gap histograms, threshold sweeps, and an efficiency table into an
//! output directory. Each row is keyed by the source artifact's file stem so
//! several model variants can share one table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::calibrate::CalibrationReport;
use crate::error::{Error, Result};
use crate::fileio::{read_text, write_text};
use crate::metrics::MetricsReport;
use crate::train::LogRecord;

/// Inputs grouped by artifact kind, each keyed by file stem.
#[derive(Debug, Default)]
pub struct ReportInputs {
    pub logs: Vec<(String, Vec<LogRecord>)>,
    pub metrics: Vec<(String, MetricsReport)>,
    pub calibrations: Vec<(String, CalibrationReport)>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Parse a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = read_text(path)?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(serde_json::from_str(line).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?);
    }
    Ok(records)
}

/// Sort input artifacts by kind: `.jsonl` files are training logs; JSON
/// objects are told apart by their distinguishing fields.
pub fn classify_inputs(paths: &[PathBuf]) -> Result<ReportInputs> {
    let mut inputs = ReportInputs::default();
    for path in paths {
        let name = stem(path);
        if path.extension().is_some_and(|e| e == "jsonl") {
            inputs.logs.push((name, read_log(path)?));
            continue;
        }
        let value: serde_json::Value = crate::fileio::read_json(path)?;
        let reparse = |source| Error::Json {
            path: path.display().to_string(),
            source,
        };
        if value.get("selected_theta").is_some() {
            let report = serde_json::from_value(value).map_err(reparse)?;
            inputs.calibrations.push((name, report));
        } else if value.get("per_layer_exec_ratio").is_some() {
            let report = serde_json::from_value(value).map_err(reparse)?;
            inputs.metrics.push((name, report));
        } else {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                reason: "expected a training log (.jsonl), a metrics report, \
                         or a calibration report"
                    .into(),
            });
        }
    }
    Ok(inputs)
}

fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

fn finish(out_dir: &Path, file: &str, body: String, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = out_dir.join(file);
    write_text(&path, &body)?;
    written.push(path);
    Ok(())
}

/// Per-layer execution ratios of each evaluated model.
fn layer_exec_csv(inputs: &ReportInputs) -> String {
    let mut body = String::from("source,layer,exec_ratio\n");
    for (name, report) in &inputs.metrics {
        for (layer, ratio) in report.per_layer_exec_ratio.iter().enumerate() {
            let _ = writeln!(body, "{},{layer},{ratio}", csv_field(name));
        }
    }
    body
}

/// Per-epoch accuracy, execution ratios, gap medians, and flip ratios.
fn training_curves_csv(inputs: &ReportInputs) -> String {
    let mut body = String::from(
        "source,epoch,test_accuracy,train_exec_ratio,test_exec_ratio,\
         median_abs_gap,flip_ratio\n",
    );
    for (name, records) in &inputs.logs {
        for record in records {
            if let LogRecord::Epoch(e) = record {
                let _ = writeln!(
                    body,
                    "{},{},{},{},{},{},{}",
                    csv_field(name),
                    e.epoch,
                    e.test_accuracy,
                    e.train_exec_ratio,
                    e.test_exec_ratio,
                    e.median_abs_gap,
                    e.flip_ratio
                );
            }
        }
    }
    body
}

/// Pooled router logit-gap histogram of each evaluated model.
fn gap_histogram_csv(inputs: &ReportInputs) -> String {
    let mut body = String::from("source,bin_lo,bin_hi,count\n");
    for (name, report) in &inputs.metrics {
        let hist = &report.gaps.pooled;
        for (i, count) in hist.counts.iter().enumerate() {
            let _ = writeln!(
                body,
                "{},{},{},{count}",
                csv_field(name),
                hist.edges[i],
                hist.edges[i + 1]
            );
        }
    }
    body
}

/// Accuracy versus compute for each evaluated model.
fn efficiency_csv(inputs: &ReportInputs) -> String {
    let mut body = String::from(
        "source,theta,accuracy,avg_exec_ratio,per_token_flops_full,\
         per_token_flops_adaptive,normalized_flops\n",
    );
    for (name, report) in &inputs.metrics {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{},{}",
            csv_field(name),
            report.theta,
            report.accuracy,
            report.avg_exec_ratio,
            report.flops.per_token_full,
            report.flops.per_token_adaptive,
            report.flops.normalized
        );
    }
    body
}

/// Every candidate evaluated during threshold calibration.
fn threshold_sweep_csv(inputs: &ReportInputs) -> String {
    let mut body = String::from("source,phase,theta,accuracy,exec_ratio,selected\n");
    for (name, report) in &inputs.calibrations {
        for c in &report.candidates {
            let phase = match c.phase {
                crate::calibrate::Phase::Coarse => "coarse",
                crate::calibrate::Phase::Fine => "fine",
            };
            let selected = (c.theta == report.selected_theta) as u8;
            let _ = writeln!(
                body,
                "{},{phase},{},{},{},{selected}",
                csv_field(name),
                c.theta,
                c.accuracy,
                c.exec_ratio
            );
        }
    }
    body
}

/// Write every CSV that has at least one data row; returns the paths written.
pub fn write_report_csvs(inputs: &ReportInputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if !inputs.metrics.is_empty() {
        finish(out_dir, "layer_exec_ratio.csv", layer_exec_csv(inputs), &mut written)?;
        finish(out_dir, "logit_gap_histogram.csv", gap_histogram_csv(inputs), &mut written)?;
        finish(out_dir, "efficiency.csv", efficiency_csv(inputs), &mut written)?;
    }
    if !inputs.logs.is_empty() {
        finish(out_dir, "training_curves.csv", training_curves_csv(inputs), &mut written)?;
    }
    if !inputs.calibrations.is_empty() {
        finish(out_dir, "threshold_sweep.csv", threshold_sweep_csv(inputs), &mut written)?;
    }
    if written.is_empty() {
        return Err(Error::invalid("inputs", "no reportable artifacts given"));
    }
    Ok(written)
}
