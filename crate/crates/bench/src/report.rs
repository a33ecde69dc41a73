use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Scenario, Scheme};

/// One measured quantity, optionally paired with its closed-form prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub metric: String,
    pub measured: f64,
    pub predicted: Option<f64>,
    pub delta: Option<f64>,
}

impl Cell {
    pub fn measured(metric: &str, measured: impl Into<f64>) -> Self {
        Cell {
            metric: metric.to_string(),
            measured: measured.into(),
            predicted: None,
            delta: None,
        }
    }

    pub fn versus(metric: &str, measured: impl Into<f64>, predicted: f64) -> Self {
        let measured = measured.into();
        Cell {
            metric: metric.to_string(),
            measured,
            predicted: Some(predicted),
            delta: Some(measured - predicted),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scheme: Option<Scheme>,
    pub scenario: Option<Scenario>,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub messages: u64,
    pub broadcasts: u64,
    pub unicasts: u64,
    pub total_bytes: u64,
    /// Bytes per payload kind across the operation's messages.
    pub payload_bytes: BTreeMap<String, u64>,
    pub lock_sizes: Vec<usize>,
    pub client_solves: u64,
    pub client_unwraps: u64,
    pub gc_lock_builds: u64,
    pub gc_wraps: u64,
    pub cells: Vec<Cell>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_us: Option<u64>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn cell(&self, metric: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.metric == metric)
    }

    pub fn check(&mut self, name: &str, passed: bool) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Text,
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "text" => Ok(Format::Text),
            _ => Err(format!("unknown format {s:?}")),
        }
    }
}

pub const COLUMNS: [&str; 9] = [
    "scheme", "scenario", "n", "p", "seed", "metric", "measured", "predicted", "delta",
];

fn num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn rows(reports: &[Report]) -> Vec<[String; 9]> {
    let mut out = Vec::new();
    for r in reports {
        let scheme = r.scheme.map(|s| s.to_string()).unwrap_or_default();
        let scenario = r.scenario.map(|s| s.to_string()).unwrap_or_default();
        for c in &r.cells {
            out.push([
                scheme.clone(),
                scenario.clone(),
                r.n.to_string(),
                r.p.to_string(),
                r.seed.to_string(),
                c.metric.clone(),
                num(c.measured),
                opt(c.predicted),
                opt(c.delta),
            ]);
        }
    }
    out
}

/// JSON carries the whole reports; CSV and text carry one row per cell.
pub fn emit_table(reports: &[Report], format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(reports).expect("reports serialize") + "\n",
        Format::Csv => {
            let mut s = COLUMNS.join(",") + "\n";
            for row in rows(reports) {
                s += &row.join(",");
                s.push('\n');
            }
            s
        }
        Format::Text => {
            let rows = rows(reports);
            let mut width: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
            for row in &rows {
                for (w, v) in width.iter_mut().zip(row) {
                    *w = (*w).max(v.len());
                }
            }
            let mut s = String::new();
            let line = |s: &mut String, cells: &[&str]| {
                let parts: Vec<String> = cells
                    .iter()
                    .zip(&width)
                    .enumerate()
                    .map(|(i, (v, w))| if i < 6 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                    .collect();
                let _ = writeln!(s, "{}", parts.join("  ").trim_end());
            };
            line(&mut s, &COLUMNS);
            for row in &rows {
                let cells: Vec<&str> = row.iter().map(String::as_str).collect();
                line(&mut s, &cells);
            }
            for r in reports {
                for n in &r.notes {
                    let _ = writeln!(s, "# {}/{} n={}: {n}", opt_name(r.scheme), opt_name(r.scenario), r.n);
                }
                for c in r.checks.iter().filter(|c| !c.passed) {
                    let _ = writeln!(s, "# FAILED {}/{} n={}: {}", opt_name(r.scheme), opt_name(r.scenario), r.n, c.name);
                }
            }
            s
        }
    }
}

fn opt_name<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
