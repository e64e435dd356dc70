//! Result tables, CSV and JSON-lines output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::harness::{CellOutcome, RunResult};
use super::spec::CellKey;
use crate::error::{Error, Result};
use crate::meta::Mode;

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub mode: Mode,
    pub points: usize,
    pub seed: u64,
    pub mean_mse: f64,
    pub ci95: f64,
    /// Left empty unless timings were requested, so results stay a pure
    /// function of the spec.
    pub wall_seconds: Option<f64>,
}

impl CsvRow {
    pub fn from_result(r: &RunResult, with_timing: bool) -> Self {
        Self {
            mode: r.key.mode,
            points: r.key.points,
            seed: r.key.seed,
            mean_mse: r.mean_mse,
            ci95: r.ci95,
            wall_seconds: with_timing.then_some(r.wall_seconds),
        }
    }
}

pub fn rows(results: &[RunResult], with_timing: bool) -> Vec<CsvRow> {
    let mut rows: Vec<CsvRow> = results.iter().map(|r| CsvRow::from_result(r, with_timing)).collect();
    rows.sort_by_key(|r| (r.mode, r.points, r.seed));
    rows
}

pub fn write_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Seed-averaged mean and ci95 for each (mode, points) cell.
pub fn aggregate(rows: &[CsvRow]) -> BTreeMap<(Mode, usize), (f64, f64)> {
    let mut acc: BTreeMap<(Mode, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.mode, r.points)).or_insert((0.0, 0.0, 0));
        e.0 += r.mean_mse;
        e.1 += r.ci95;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(k, (m, c, n))| (k, (m / n as f64, c / n as f64)))
        .collect()
}

fn display_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Baseline => "Baseline",
        Mode::Maml => "MAML",
        Mode::TreeFixed => "Fixed TreeMAML",
        Mode::TreeLearned => "Learned TreeMAML",
    }
}

/// Aligned "mean ± ci95" table, one row per mode and one column per points
/// count; missing cells are blank.
pub fn format_table(rows: &[CsvRow]) -> String {
    let cells = aggregate(rows);
    let mut modes: Vec<Mode> = rows.iter().map(|r| r.mode).collect();
    modes.sort();
    modes.dedup();
    let mut points: Vec<usize> = rows.iter().map(|r| r.points).collect();
    points.sort_unstable();
    points.dedup();

    let header: Vec<String> = std::iter::once("Model".to_string())
        .chain(points.iter().map(|p| format!("points={p}")))
        .collect();
    let body: Vec<Vec<String>> = modes
        .iter()
        .map(|&m| {
            std::iter::once(display_name(m).to_string())
                .chain(points.iter().map(|&p| match cells.get(&(m, p)) {
                    Some((mean, ci)) => format!("{mean:.3} ± {ci:.3}"),
                    None => String::new(),
                }))
                .collect()
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|r| r[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let cols: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<width$}", width = *w))
            .collect();
        let _ = writeln!(out, "{}", cols.join(" | ").trim_end());
    };
    line(&mut out, &header);
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for row in &body {
        line(&mut out, row);
    }
    out
}

/// Write the table and the CSV for `results`.
pub fn emit_table(results: &[RunResult], out_dir: &Path, with_timing: bool) -> Result<String> {
    let rows = rows(results, with_timing);
    write_csv(&rows, &out_dir.join("results.csv"))?;
    let table = format_table(&rows);
    let path = out_dir.join("table.txt");
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

#[derive(Serialize)]
struct LogLine<'a> {
    mode: Mode,
    points: usize,
    seed: u64,
    #[serde(flatten)]
    entry: &'a crate::meta::IterationLog,
}

/// Training logs of every cell as JSON lines.
pub fn write_log(outcomes: &[CellOutcome], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in outcomes.iter().filter_map(|o| o.as_ref().ok()) {
        for entry in &r.train_log {
            let line = LogLine {
                mode: r.key.mode,
                points: r.key.points,
                seed: r.key.seed,
                entry,
            };
            serde_json::to_writer(&mut w, &line).expect("log line serializes");
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-task test errors, one row per (cell, task).
pub fn write_per_task(results: &[RunResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["mode", "points", "seed", "task", "mse"]).map_err(|e| csv_error(path, e))?;
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.key);
    for r in sorted {
        for (i, mse) in r.per_task_mse.iter().enumerate() {
            w.serialize((r.key.mode, r.key.points, r.key.seed, i, mse))
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cell_summary(failures: &[(CellKey, String)]) -> String {
    let mut s = format!("{} cell(s) failed:\n", failures.len());
    for (key, err) in failures {
        let _ = writeln!(s, "  {key}: {err}");
    }
    s
}
