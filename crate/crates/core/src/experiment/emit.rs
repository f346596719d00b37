use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, MetricsReport};

pub const METRICS_FILE: &str = "metrics.json";
pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const CURVE_FILE: &str = "curve.csv";

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

pub fn write_json<S: Serialize>(value: &S, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// One row per populated cell, steps and tasks counted from 0.
pub fn write_matrix_csv(matrix: &AccuracyMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "task", "accuracy"]).map_err(csv_err)?;
    for (k, row) in matrix.rows.iter().enumerate() {
        for (j, a) in row.iter().enumerate() {
            w.serialize((k, j, a)).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv(matrix: &AccuracyMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "pooled_accuracy"]).map_err(csv_err)?;
    for (k, a) in matrix.pooled.iter().enumerate() {
        w.serialize((k, a)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.json`, `accuracy_matrix.csv` and `curve.csv` into `dir`.
pub fn emit_metrics(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_json(report, dir.join(METRICS_FILE))?;
    write_matrix_csv(&report.matrix, dir.join(MATRIX_FILE))?;
    write_curve_csv(&report.matrix, dir.join(CURVE_FILE))
}
