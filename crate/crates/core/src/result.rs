// SPDX-License-Identifier: Apache-2.0

//! Tabular experiment output with a JSON metadata sidecar.
//!
//! The CSV holds only deterministic data; wall time and other run-dependent
//! values live in the sidecar so reruns produce byte-identical CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub experiment: String,
    pub device: String,
    pub seed: u64,
    pub version: String,
    pub wall_time_s: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub x_label: String,
    pub y_labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub metadata: Metadata,
}

impl ExperimentResult {
    pub fn new(x_label: &str, y_labels: &[&str]) -> Self {
        Self {
            x_label: x_label.to_string(),
            y_labels: y_labels.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            metadata: Metadata {
                version: crate::VERSION.to_string(),
                ..Metadata::default()
            },
        }
    }

    pub fn width(&self) -> usize {
        1 + self.y_labels.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.width() {
            return Err(Error::InvalidInput(format!(
                "row has {} columns, expected {}",
                row.len(),
                self.width()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn headers(&self) -> Vec<&str> {
        std::iter::once(self.x_label.as_str())
            .chain(self.y_labels.iter().map(String::as_str))
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.headers().iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn x(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let m = message.into();
        if !self.metadata.warnings.contains(&m) {
            self.metadata.warnings.push(m);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.headers().join(",");
        out.push('\n');
        for row in &self.rows {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes the CSV and its `.json` metadata sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(csv_path, self.to_csv())?;
        let meta = serde_json::to_string_pretty(&self.metadata).map_err(Error::from)?;
        std::fs::write(Self::sidecar_path(csv_path), meta + "\n")?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            column: 1,
            message: "empty CSV".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: "need at least two columns".into(),
            });
        }
        let mut res = Self::new(cols[0], &cols[1..]);
        for (ln, line) in lines {
            let mut row = Vec::with_capacity(cols.len());
            let mut col = 1;
            for cell in line.split(',') {
                let v = cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: ln + 1,
                    column: col,
                    message: format!("not a number: '{}'", cell.trim()),
                })?;
                row.push(v);
                col += cell.len() + 1;
            }
            res.push_row(row).map_err(|e| e.context(format!("line {}", ln + 1)))?;
        }
        Ok(res)
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(csv_path)?;
        let mut res = Self::from_csv(&text).map_err(|e| e.context(csv_path.display().to_string()))?;
        let side = Self::sidecar_path(csv_path);
        if side.exists() {
            res.metadata = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut r = ExperimentResult::new("x_value", &["echo_amp", "echo_phase"]);
        r.push_row(vec![0.1, 1.0 / 3.0, -2.5e-17]).unwrap();
        r.push_row(vec![0.2, f64::MAX, 0.0]).unwrap();
        let back = ExperimentResult::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.rows, r.rows);
        assert_eq!(back.headers(), r.headers());
    }

    #[test]
    fn ragged_rows_rejected() {
        let mut r = ExperimentResult::new("x", &["y"]);
        assert!(r.push_row(vec![1.0]).is_err());
        assert!(ExperimentResult::from_csv("x,y\n1,2\n3\n").is_err());
    }

    #[test]
    fn bad_cell_reports_position() {
        let err = ExperimentResult::from_csv("x,y\n1,2\n3,abc\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, column: 3, .. }), "{err:?}");
    }

    #[test]
    fn write_creates_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out/run.csv");
        let mut r = ExperimentResult::new("x", &["y"]);
        r.push_row(vec![1.0, 2.0]).unwrap();
        r.metadata.seed = 7;
        r.write(&path).unwrap();
        let back = ExperimentResult::read(&path).unwrap();
        assert_eq!(back.metadata.seed, 7);
        assert_eq!(back.rows, r.rows);
    }
}
