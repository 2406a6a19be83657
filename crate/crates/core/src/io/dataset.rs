//! Dataset CSV files.
//!
//! Layout: a header `timestamp,dim_0,…,dim_{D−1}` followed by one row per
//! tick. Timestamps are either all integers or all ISO-8601 date-times, and
//! must be evenly spaced.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub timestamps: Vec<String>,
    /// `[T × D]`
    pub values: Tensor,
}

impl Dataset {
    /// Integer ticks `0..T`.
    pub fn from_values(values: Tensor) -> Self {
        let timestamps = (0..values.rows()).map(|t| t.to_string()).collect();
        Self { timestamps, values }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.cols()
    }
}

fn data_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_instant(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

/// Parses dataset text; `label` names the source in error messages.
pub fn parse_dataset(text: &str, label: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| data_err(label, 1, e.to_string()))?,
        None => return Err(data_err(label, 1, "empty file")),
    };
    if header.get(0) != Some("timestamp") {
        return Err(data_err(label, 1, "first header column must be `timestamp`"));
    }
    let width = header.len();
    if width < 2 {
        return Err(data_err(label, 1, "header declares no value columns"));
    }

    let mut stamps = Vec::new();
    let mut lines = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            data_err(label, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != width {
            return Err(data_err(
                label,
                line,
                format!("expected {width} fields as in the header, found {}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate().skip(1) {
            if cell.is_empty() {
                return Err(data_err(label, line, format!("missing value in column `{}`", &header[j])));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| data_err(label, line, format!("non-numeric value `{cell}` in column `{}`", &header[j])))?;
            values.push(v);
        }
        stamps.push(rec[0].to_string());
        lines.push(line);
    }
    if stamps.is_empty() {
        return Err(data_err(label, 2, "no data rows"));
    }
    check_spacing(&stamps, &lines, label)?;
    Ok(Dataset {
        values: Tensor::matrix(stamps.len(), width - 1, values),
        timestamps: stamps,
    })
}

fn check_spacing(stamps: &[String], lines: &[usize], label: &str) -> Result<()> {
    let ints: Option<Vec<i64>> = stamps.iter().map(|s| s.parse::<i64>().ok()).collect();
    let instants = match ints {
        Some(v) => v,
        None => stamps
            .iter()
            .zip(lines)
            .map(|(s, &line)| parse_instant(s).ok_or_else(|| data_err(label, line, format!("unreadable timestamp `{s}`"))))
            .collect::<Result<Vec<_>>>()?,
    };
    if instants.len() < 2 {
        return Ok(());
    }
    let step = instants[1] - instants[0];
    if step <= 0 {
        return Err(data_err(label, lines[1], "timestamps must increase"));
    }
    for k in 2..instants.len() {
        if instants[k] - instants[k - 1] != step {
            return Err(data_err(label, lines[k], "timestamps are not evenly spaced"));
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

/// Canonical text form; values use the shortest representation that parses
/// back to the same double.
pub fn dataset_csv(ds: &Dataset) -> String {
    let mut out = String::from("timestamp");
    for j in 0..ds.dims() {
        let _ = write!(out, ",dim_{j}");
    }
    out.push('\n');
    for (t, stamp) in ds.timestamps.iter().enumerate() {
        out.push_str(stamp);
        for v in ds.values.row(t) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, dataset_csv(ds))?;
    Ok(())
}
