//! Artifact writers used by the command-line driver: CSV tables carrying a
//! deterministic manifest echo in `#` header comments, JSON documents with
//! sorted keys, and the coarse-trajectory round trip.
//!
//! Everything written here must be byte-reproducible from the resolved
//! configuration and seed alone, so no timestamps or host details go into
//! CSV files; the volatile bits (wall time) live only in the run manifest.

use crate::error::{Error, Result};
use crate::parrep::CoarseTrajectory;
use serde_json::Value;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Canonical text form of a float: shortest representation that parses
/// back to the same bits, so repeated runs produce identical files.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Output directory handle plus the manifest echo prepended to every CSV.
pub struct Artifacts {
    dir: PathBuf,
    echo: Vec<String>,
}

impl Artifacts {
    /// Create the output directory (and parents) if needed. The echo
    /// lines are written verbatim after a `# ` prefix at the top of every
    /// CSV artifact.
    pub fn new(dir: impl Into<PathBuf>, echo: Vec<String>) -> Result<Artifacts> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Artifacts { dir, echo })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Write a CSV file: echo comments, a header row, then the data rows.
    pub fn write_csv(&self, name: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut text = String::new();
        for line in &self.echo {
            text.push_str("# ");
            text.push_str(line);
            text.push('\n');
        }
        text.push_str(&columns.join(","));
        text.push('\n');
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(Error::config(format!(
                    "csv row {i} has {} fields, header has {}",
                    row.len(),
                    columns.len()
                )));
            }
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let path = self.path(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Write a JSON document, pretty-printed with sorted keys.
    pub fn write_json(&self, name: &str, value: &Value) -> Result<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::config(format!("json encoding failed: {e}")))?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Echo lines for a run: tool version, subcommand, then the resolved
/// configuration in sorted key order. Keys that place or parallelize the
/// run without affecting its results are skipped so that re-running a
/// manifest into another directory reproduces artifacts byte for byte.
pub fn manifest_echo(subcommand: &str, resolved: &BTreeMap<String, String>) -> Vec<String> {
    let mut lines = vec![
        format!("metastable {}", env!("CARGO_PKG_VERSION")),
        format!("subcommand = {subcommand}"),
    ];
    for (k, v) in resolved {
        if k == "run.output_dir" || k == "sim.threads" {
            continue;
        }
        lines.push(format!("{k} = {v}"));
    }
    lines
}

/// The run manifest: everything needed to re-derive the artifacts (the
/// resolved flat config and subcommand) plus volatile run metadata.
pub fn run_manifest(
    subcommand: &str,
    resolved: &BTreeMap<String, String>,
    wall_seconds: f64,
) -> Value {
    let config: serde_json::Map<String, Value> = resolved
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "config": config,
        "wall_seconds": wall_seconds,
    })
}

/// Column layout of a coarse-trajectory CSV for the given dimension.
pub fn coarse_columns(dim: usize) -> Vec<&'static str> {
    if dim == 1 {
        vec!["entry_time", "state", "residence", "exit_x"]
    } else {
        vec!["entry_time", "state", "residence", "exit_x", "exit_y"]
    }
}

/// Rows of a coarse-trajectory CSV.
pub fn coarse_rows(traj: &CoarseTrajectory, dim: usize) -> Vec<Vec<String>> {
    traj.events()
        .iter()
        .map(|e| {
            let mut row = vec![
                fmt_f64(e.entry),
                e.state.to_string(),
                fmt_f64(e.duration),
                fmt_f64(e.exit_point[0]),
            ];
            if dim > 1 {
                row.push(fmt_f64(e.exit_point[1]));
            }
            row
        })
        .collect()
}

/// Header columns of a CSV file (first non-comment line).
pub fn csv_columns(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        return Ok(line.split(',').map(|s| s.trim().to_string()).collect());
    }
    Err(Error::config(format!("{}: no header row found", path.display())))
}

/// Read a CSV file as named columns of floats, skipping `#` comments.
pub fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut header: Option<Vec<String>> = None;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match &header {
            None => {
                cols = vec![Vec::new(); fields.len()];
                header = Some(fields.iter().map(|s| s.to_string()).collect());
            }
            Some(h) => {
                if fields.len() != h.len() {
                    return Err(Error::config(format!(
                        "{}:{}: expected {} fields, found {}",
                        path.display(),
                        lineno + 1,
                        h.len(),
                        fields.len()
                    )));
                }
                for (c, f) in cols.iter_mut().zip(&fields) {
                    let v: f64 = f.parse().map_err(|_| {
                        Error::config(format!(
                            "{}:{}: not a number: {f}",
                            path.display(),
                            lineno + 1
                        ))
                    })?;
                    c.push(v);
                }
            }
        }
    }
    match header {
        Some(h) => Ok((h, cols)),
        None => Err(Error::config(format!("{}: empty csv", path.display()))),
    }
}

/// Reconstruct a coarse trajectory from its CSV artifact.
pub fn read_coarse_trajectory(path: &Path) -> Result<CoarseTrajectory> {
    let (header, cols) = read_csv_columns(path)?;
    let expect_1d = ["entry_time", "state", "residence", "exit_x"];
    let ok = header.len() >= 4 && header.iter().zip(expect_1d).all(|(a, b)| a == b);
    if !ok || header.len() > 5 {
        return Err(Error::config(format!(
            "{}: not a coarse-trajectory csv (columns {})",
            path.display(),
            header.join(",")
        )));
    }
    let mut traj = CoarseTrajectory::new();
    for i in 0..cols[0].len() {
        let entry = cols[0][i];
        let state = cols[1][i];
        if state < 0.0 || state.fract() != 0.0 {
            return Err(Error::config(format!(
                "{}: row {}: state label {state} is not a nonnegative integer",
                path.display(),
                i + 1
            )));
        }
        let duration = cols[2][i];
        let y = if header.len() == 5 { cols[4][i] } else { 0.0 };
        let point = [cols[3][i], y];
        if (entry - traj.total_time()).abs() > 1e-9 * traj.total_time().max(1.0) {
            return Err(Error::config(format!(
                "{}: row {}: entry time {entry} does not continue the trajectory",
                path.display(),
                i + 1
            )));
        }
        traj.push(state as usize, duration, point);
    }
    if traj.is_empty() {
        return Err(Error::config(format!("{}: no events", path.display())));
    }
    Ok(traj)
}
