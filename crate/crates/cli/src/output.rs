//! Trace CSVs, JSON summaries and comparison tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use flanp_core::flanp::Trace;
use flanp_core::losses::CurvatureConstants;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const TRACE_HEADER: [&str; 8] = [
    "experiment_id",
    "algorithm",
    "stage_n",
    "round",
    "sim_time",
    "grad_norm_sq",
    "subopt",
    "participants",
];

#[derive(Debug, Clone, Serialize)]
struct TraceRow<'a> {
    experiment_id: &'a str,
    algorithm: &'a str,
    stage_n: usize,
    round: usize,
    sim_time: f64,
    grad_norm_sq: f64,
    subopt: f64,
    participants: usize,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("writing {}: {e}", path.display()))
}

/// Writes the header and one row per round record of every trace.
pub fn write_trace_csv<'a>(path: &Path, traces: impl IntoIterator<Item = (&'a str, &'a Trace)>) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    w.write_record(TRACE_HEADER).map_err(|e| io_err(path, e))?;
    for (experiment_id, trace) in traces {
        for r in &trace.records {
            w.serialize(TraceRow {
                experiment_id,
                algorithm: &trace.algorithm,
                stage_n: r.stage_n,
                round: r.round,
                sim_time: r.sim_time,
                grad_norm_sq: r.grad_norm_sq,
                subopt: r.subopt,
                participants: r.participants,
            })
            .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub n: usize,
    pub rounds: usize,
    pub sim_time: f64,
    pub threshold: Option<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub tau: usize,
    pub formula_rounds: usize,
    pub feasible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub experiment_id: String,
    pub replica: usize,
    pub algorithm: String,
    pub status: &'static str,
    pub error: Option<String>,
    pub c: f64,
    pub sigma2: f64,
    pub total_sim_time: Option<f64>,
    pub final_model_norm: Option<f64>,
    pub total_rounds: Option<usize>,
    pub curvature: Option<CurvatureConstants>,
    pub stages: Vec<StageReport>,
}

impl RunSummary {
    pub fn stage_reports(trace: &Trace) -> Vec<StageReport> {
        trace
            .stages
            .iter()
            .map(|s| StageReport {
                n: s.n,
                rounds: s.rounds,
                sim_time: s.time,
                threshold: s.threshold,
                eta: s.params.eta,
                gamma: s.params.gamma,
                alpha: s.params.alpha,
                tau: s.params.tau,
                formula_rounds: s.params.rounds,
                feasible: s.feasible,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub experiment_id: String,
    pub seed: u64,
    pub replicas: usize,
    /// Simulated time units, not seconds.
    pub time_unit: &'static str,
    pub runs: Vec<RunSummary>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub axis: String,
    pub value: String,
    pub baseline: String,
    pub t_flanp: f64,
    pub t_baseline: f64,
    pub ratio: f64,
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Right-aligned text table of comparison rows.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let header = ["axis", "value", "baseline", "T_flanp", "T_baseline", "ratio"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.axis.clone(),
                r.value.clone(),
                r.baseline.clone(),
                format!("{:.3}", r.t_flanp),
                format!("{:.3}", r.t_baseline),
                format!("{:.4}", r.ratio),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(&header);
    for row in &body {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&cells);
    }
    out
}
