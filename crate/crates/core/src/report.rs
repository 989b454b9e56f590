//! Cross-run comparison tables and per-run plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{Error, Result};
use crate::harness::{MetricsRecord, RunSummary};

/// Which summary number a comparison aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FinalValLoss,
    FinalTrainLoss,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::FinalValLoss => "final_val_loss",
            Metric::FinalTrainLoss => "final_train_loss",
        }
    }

    fn of(self, s: &RunSummary) -> Option<f64> {
        match self {
            Metric::FinalValLoss => s.final_val_loss,
            Metric::FinalTrainLoss => s.final_train_loss,
        }
    }
}

/// Mean and sample standard deviation of one method at one budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub budget: f64,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Sample std with the n−1 denominator; 0 when there is a single seed.
    pub std: f64,
    /// Lowest mean among the cells sharing this budget.
    pub best: bool,
}

impl Cell {
    pub fn n(&self) -> usize {
        self.seeds.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub metric: Metric,
    pub budgets: Vec<f64>,
    /// One entry per (method, budget) present in the input, methods in
    /// declaration order, budgets ascending.
    pub cells: Vec<Cell>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Method, budget, seeds and metric values of one comparison cell.
type Group = (Method, f64, Vec<u64>, Vec<f64>);

/// Groups summaries by method and budget and aggregates `metric` over seeds.
/// A group whose runs all lack the metric is an error, as is empty input.
pub fn compare(summaries: &[RunSummary], metric: Metric) -> Result<Report> {
    if summaries.is_empty() {
        return Err(Error::Config("nothing to compare".into()));
    }
    let mut groups: BTreeMap<(usize, u64), Group> = BTreeMap::new();
    for s in summaries {
        let idx = Method::ALL.iter().position(|m| *m == s.method).expect("method listed");
        let g = groups
            .entry((idx, s.budget.to_bits()))
            .or_insert_with(|| (s.method, s.budget, Vec::new(), Vec::new()));
        g.2.push(s.seed);
        if let Some(v) = metric.of(s) {
            g.3.push(v);
        }
    }
    let mut cells = Vec::with_capacity(groups.len());
    for (method, budget, seeds, values) in groups.into_values() {
        if values.is_empty() {
            return Err(Error::Config(format!(
                "group {method} at budget {budget} has no {} values",
                metric.as_str()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "group {method} at budget {budget} has a non-finite value"
            )));
        }
        let (mean, std) = mean_std(&values);
        cells.push(Cell {
            method,
            budget,
            seeds,
            mean,
            std,
            best: false,
        });
    }
    let mut budgets: Vec<f64> = cells.iter().map(|c| c.budget).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    for &b in &budgets {
        let best = cells
            .iter()
            .filter(|c| c.budget == b)
            .map(|c| c.mean)
            .fold(f64::INFINITY, f64::min);
        for c in cells.iter_mut().filter(|c| c.budget == b && c.mean == best) {
            c.best = true;
        }
    }
    Ok(Report { metric, budgets, cells })
}

impl Report {
    fn cell(&self, method: Method, budget: f64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.budget == budget)
    }

    fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.method) {
                out.push(c.method);
            }
        }
        out
    }

    /// Aligned table, methods down and budgets across. `*` marks the best
    /// cell of a column; `^` marks a single-seed cell.
    pub fn to_text(&self, decimals: usize) -> String {
        let header: Vec<String> = std::iter::once(format!("{} (mean ± std)", self.metric.as_str()))
            .chain(self.budgets.iter().map(|b| format!("{b} RST s")))
            .collect();
        let mut rows = vec![header];
        let mut single = false;
        for m in self.methods() {
            let mut row = vec![m.to_string()];
            for &b in &self.budgets {
                row.push(match self.cell(m, b) {
                    Some(c) => {
                        single |= c.n() == 1;
                        format!(
                            "{:.d$} ± {:.d$}{}{}",
                            c.mean,
                            c.std,
                            if c.n() == 1 { "^" } else { "" },
                            if c.best { "*" } else { "" },
                            d = decimals
                        )
                    }
                    None => "-".into(),
                });
            }
            rows.push(row);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (s, &w))| {
                    let pad = w - s.chars().count();
                    if j == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out.push_str("* best mean in column\n");
        if single {
            out.push_str("^ single seed; std reported as 0\n");
        }
        out
    }

    /// Long-format CSV: one row per cell, full precision.
    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            method: &'a str,
            budget: f64,
            metric: &'a str,
            n: usize,
            mean: f64,
            std: f64,
            best: bool,
            seeds: String,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(Row {
                method: c.method.as_str(),
                budget: c.budget,
                metric: self.metric.as_str(),
                n: c.n(),
                mean: c.mean,
                std: c.std,
                best: c.best,
                seeds: c.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            })
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

/// One row of the plot-data CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub rst_elapsed: f64,
    pub step: u64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub active_layers: usize,
    pub selected_fraction: f64,
}

pub const PLOT_COLUMNS: [&str; 7] = [
    "rst_elapsed",
    "step",
    "lr",
    "train_loss",
    "val_loss",
    "active_layers",
    "selected_fraction",
];

impl From<&MetricsRecord> for PlotRow {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            rst_elapsed: r.rst_elapsed,
            step: r.step,
            lr: r.lr,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            active_layers: r.active_layers,
            selected_fraction: r.selected_fraction,
        }
    }
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("csv: {e}"))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

/// CSV with one row per record; absent losses are blank.
pub fn emit_plot_data(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Config("no metrics records to plot".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(PlotRow::from(r)).map_err(csv_err)?;
    }
    finish(w)
}

pub fn parse_plot_data(text: &str) -> Result<Vec<PlotRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers().map_err(csv_err)?;
    if !headers.iter().eq(PLOT_COLUMNS) {
        return Err(Error::Parse(format!("unexpected plot columns: {headers:?}")));
    }
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}
