//! Subcommand implementations. Each returns what it wrote so callers and
//! tests can inspect it; `main` only prints and maps errors to exit codes.

use std::path::{Path, PathBuf};

use flanp_core::data;
use flanp_core::simclock::{self, HarmonicTable, EULER_GAMMA};
use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::{self, ReplicaResult, ReplicaSeeds};
use crate::output::{self, ComparisonRow, ExperimentSummary, RunSummary};

const TIME_UNIT: &str = "simulated";

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))
}

fn replica_id(cfg: &ExperimentConfig, replica: usize) -> String {
    if cfg.replicas == 1 {
        cfg.experiment_id.clone()
    } else {
        format!("{}-r{replica}", cfg.experiment_id)
    }
}

fn run_all(cfg: &ExperimentConfig, jobs: usize) -> CliResult<Vec<ReplicaResult>> {
    experiment::with_jobs(jobs, || {
        (0..cfg.replicas)
            .into_par_iter()
            .map(|r| experiment::run_replica(cfg, r))
            .collect::<Vec<_>>()
    })?
    .into_iter()
    .collect()
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub failures: usize,
}

/// Runs FLANP and the configured baselines for every replica and writes
/// `<id>.csv` and `<id>.summary.json` into `out`. Failed runs contribute
/// their partial trace and a failure record; the call then returns a
/// runtime error after writing both files.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> CliResult<RunReport> {
    let results = run_all(cfg, jobs)?;
    ensure_dir(out)?;

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let ids: Vec<String> = results.iter().map(|r| replica_id(cfg, r.replica)).collect();
    let mut traces = Vec::new();
    for (res, id) in results.iter().zip(&ids) {
        for outcome in &res.outcomes {
            let trace = outcome.trace();
            if let Some(t) = trace {
                traces.push((id.as_str(), t));
            }
            let error = outcome.result.as_ref().err().map(ToString::to_string);
            if let Some(e) = &error {
                failures.push(format!("{id}/{}: {e}", outcome.name()));
            }
            runs.push(RunSummary {
                experiment_id: id.clone(),
                replica: res.replica,
                algorithm: outcome.name(),
                status: if error.is_some() { "failed" } else { "ok" },
                error,
                c: res.budget.c,
                sigma2: res.budget.sigma2,
                total_sim_time: trace.map(|t| t.total_time),
                final_model_norm: trace.map(|t| t.final_model.norm()),
                total_rounds: trace.map(|t| t.total_rounds()),
                curvature: trace.map(|t| t.curvature),
                stages: trace.map(RunSummary::stage_reports).unwrap_or_default(),
            });
        }
    }

    let csv = out.join(format!("{}.csv", cfg.experiment_id));
    let summary = out.join(format!("{}.summary.json", cfg.experiment_id));
    output::write_trace_csv(&csv, traces)?;
    output::write_json(
        &summary,
        &ExperimentSummary {
            experiment_id: cfg.experiment_id.clone(),
            seed: cfg.seed,
            replicas: cfg.replicas,
            time_unit: TIME_UNIT,
            runs,
        },
    )?;
    if !failures.is_empty() {
        return Err(CliError::runtime(format!(
            "{} run(s) failed (partial traces in {}):\n  {}",
            failures.len(),
            csv.display(),
            failures.join("\n  ")
        )));
    }
    Ok(RunReport {
        csv,
        summary,
        failures: 0,
    })
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub csv: PathBuf,
    pub rows: Vec<ComparisonRow>,
    pub table: String,
}

/// For every sweep point, averages total simulated time over the replicas
/// for FLANP and each baseline and reports `T_flanp / T_baseline`.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path, jobs: usize, require_sweep: bool) -> CliResult<CompareReport> {
    if cfg.baselines.is_empty() {
        return Err(CliError::config("baselines: comparison needs at least one baseline"));
    }
    if require_sweep && cfg.sweep.is_empty() {
        return Err(CliError::config("sweep: at least one axis must list values"));
    }
    let points = cfg.points();
    let tasks: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.replicas).map(move |r| (p, r)))
        .collect();
    let results: Vec<CliResult<ReplicaResult>> = experiment::with_jobs(jobs, || {
        tasks
            .par_iter()
            .map(|&(p, r)| experiment::run_replica(&points[p].config, r))
            .collect()
    })?;

    let n_alg = cfg.algorithms().len();
    let mut totals = vec![vec![Vec::with_capacity(cfg.replicas); n_alg]; points.len()];
    let mut names = vec![String::new(); n_alg];
    for (&(p, _), res) in tasks.iter().zip(results) {
        let res = res?;
        for (a, outcome) in res.outcomes.iter().enumerate() {
            names[a] = outcome.name();
            match &outcome.result {
                Ok(t) => totals[p][a].push(t.total_time),
                Err(e) => {
                    return Err(CliError::runtime(format!(
                        "{} = {}, replica {}, {}: {e}",
                        points[p].axis_names(),
                        points[p].axis_values(),
                        res.replica,
                        outcome.name()
                    )))
                }
            }
        }
    }

    let mut rows = Vec::new();
    for (point, per_alg) in points.iter().zip(&totals) {
        let means: Vec<f64> = per_alg.iter().map(|v| replica_mean(v)).collect();
        for a in 1..n_alg {
            rows.push(ComparisonRow {
                axis: point.axis_names(),
                value: point.axis_values(),
                baseline: names[a].clone(),
                t_flanp: means[0],
                t_baseline: means[a],
                ratio: means[0] / means[a],
            });
        }
    }
    ensure_dir(out)?;
    let csv = out.join(format!("{}.compare.csv", cfg.experiment_id));
    output::write_comparison_csv(&csv, &rows)?;
    let table = output::comparison_table(&rows);
    Ok(CompareReport { csv, rows, table })
}

/// Arithmetic mean, summed in replica order.
pub fn replica_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    /// Largest fleet size for the Monte Carlo and telescoping checks.
    pub max_n: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            max_n: 64,
            trials: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub abs_dev: f64,
    pub rel_dev: f64,
}

impl Check {
    fn line(&self) -> String {
        format!(
            "{}  {:<40}  abs_dev={:.3e}  rel_dev={:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.abs_dev,
            self.rel_dev
        )
    }
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub checks: Vec<Check>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        self.checks.iter().map(|c| c.line() + "\n").collect()
    }
}

fn check(name: impl Into<String>, value: f64, expected: f64, tol: f64) -> Check {
    let abs_dev = (value - expected).abs();
    let rel_dev = if expected == 0.0 { abs_dev } else { abs_dev / expected.abs() };
    Check {
        name: name.into(),
        pass: abs_dev <= tol,
        abs_dev,
        rel_dev,
    }
}

/// Analytic order-statistics and harmonic-number identities checked against
/// each other and against Monte Carlo.
pub fn cmd_oracle(opts: OracleOptions) -> CliResult<OracleReport> {
    if opts.max_n == 0 {
        return Err(CliError::config("max_n: fleet size must be at least 1"));
    }
    if opts.trials == 0 {
        return Err(CliError::config("trials: must be at least 1"));
    }
    let runtime = |e: flanp_core::Error| CliError::runtime(e.to_string());
    let mut checks = Vec::new();

    checks.push(check("order_stat_mean(4,4) = 25/12", simclock::order_stat_mean(4, 4).map_err(runtime)?, 25.0 / 12.0, 1e-12));
    checks.push(check("order_stat_mean(2,1) = 1/2", simclock::order_stat_mean(2, 1).map_err(runtime)?, 0.5, 1e-12));
    checks.push(check("order_stat_mean(1,1) = 1", simclock::order_stat_mean(1, 1).map_err(runtime)?, 1.0, 1e-12));
    checks.push(check("doubling_ratio(2,1) = 4/3", simclock::doubling_ratio(2, 1).map_err(runtime)?, 4.0 / 3.0, 1e-9));
    checks.push(check("doubling_ratio(4,1) = 1.4", simclock::doubling_ratio(4, 1).map_err(runtime)?, 1.4, 1e-9));

    // Worst slack of the ratio bound over K = 1..10; positive means violated.
    let mut worst = f64::NEG_INFINITY;
    for k in 1..=10 {
        let n = 1usize << k;
        let excess = simclock::doubling_ratio(n, 1).map_err(runtime)? - (2.0 + 1.0 / n as f64);
        worst = worst.max(excess);
    }
    checks.push(Check {
        name: "doubling_ratio(2^K,1) <= 2 + 2^-K, K<=10".into(),
        pass: worst <= 0.0,
        abs_dev: worst.max(0.0),
        rel_dev: worst.max(0.0) / 2.0,
    });

    let table = HarmonicTable::new(1_000_000);
    let mut sandwich = 0.0f64;
    for n in 2..=1_000_000usize {
        let h = table.get(n);
        let lo = (n as f64).ln() + EULER_GAMMA;
        let hi = ((n + 1) as f64).ln() + EULER_GAMMA;
        sandwich = sandwich.max(lo - h).max(h - hi);
    }
    checks.push(Check {
        name: "ln n + g <= H_n <= ln(n+1) + g, n<=1e6".into(),
        pass: sandwich <= 0.0,
        abs_dev: sandwich.max(0.0),
        rel_dev: sandwich.max(0.0),
    });

    let mut n = 2;
    while n <= opts.max_n {
        let mut prev = 0.0;
        let mut sum = 0.0;
        for i in 1..=n {
            let m = simclock::order_stat_mean(n, i).map_err(runtime)?;
            sum += m - prev;
            prev = m;
        }
        checks.push(check(format!("telescoping sum = H_{n}"), sum, HarmonicTable::new(n).get(n), 1e-9));

        let mc = simclock::monte_carlo_order_stats(n, 1.0, opts.trials, opts.seed).map_err(runtime)?;
        let mut worst = Check {
            name: format!("monte carlo order stats, N = {n}"),
            pass: true,
            abs_dev: 0.0,
            rel_dev: 0.0,
        };
        for (i, m) in mc.iter().enumerate() {
            let exact = simclock::order_stat_mean(n, i + 1).map_err(runtime)?;
            let abs = (m - exact).abs();
            let rel = abs / exact;
            let ok = if exact < 0.5 { abs <= 0.02 } else { rel <= 0.02 };
            worst.pass &= ok;
            worst.abs_dev = worst.abs_dev.max(abs);
            worst.rel_dev = worst.rel_dev.max(rel);
        }
        checks.push(worst);
        n *= 2;
    }

    let small = opts.trials.min(1000);
    let half = simclock::monte_carlo_order_stats(4, 2.0, small, opts.seed).map_err(runtime)?;
    let unit = simclock::monte_carlo_order_stats(4, 1.0, small, opts.seed).map_err(runtime)?;
    let scale_dev = half
        .iter()
        .zip(&unit)
        .map(|(h, u)| (h - u / 2.0).abs())
        .fold(0.0, f64::max);
    checks.push(check("rate 2 halves rate 1 means", scale_dev, 0.0, 1e-12));

    Ok(OracleReport { checks })
}

#[derive(Debug, Clone)]
pub struct GenDataReport {
    pub data: PathBuf,
    pub speeds: PathBuf,
}

/// Writes replica 0's synthetic dataset as `<id>.data.csv` (label first,
/// clients in original order) and its unit times as `<id>.speeds.json`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<GenDataReport> {
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        return Err(CliError::config("data: gen-data needs a synthetic data source"));
    }
    let seeds = ReplicaSeeds::derive(cfg.seed, 0);
    let shards = experiment::load_shards(cfg, &seeds)?;
    let fleet = experiment::load_fleet(cfg, &seeds)?;
    ensure_dir(out)?;

    let data_path = out.join(format!("{}.data.csv", cfg.experiment_id));
    let io = |p: &Path, e: &dyn std::fmt::Display| CliError::runtime(format!("writing {}: {e}", p.display()));
    let mut w = csv::Writer::from_path(&data_path).map_err(|e| io(&data_path, &e))?;
    let dim = shards[0].dim();
    let mut header = vec!["y".to_string()];
    header.extend((1..=dim).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(|e| io(&data_path, &e))?;
    for shard in &shards {
        for z in shard.samples() {
            let mut row = vec![z.y.to_string()];
            row.extend(z.x.iter().map(f64::to_string));
            w.write_record(&row).map_err(|e| io(&data_path, &e))?;
        }
    }
    w.flush().map_err(|e| io(&data_path, &e))?;

    let mut times = vec![0.0; fleet.len()];
    for p in fleet.profiles() {
        times[p.id] = p.unit_time;
    }
    let speeds_path = out.join(format!("{}.speeds.json", cfg.experiment_id));
    output::write_json(&speeds_path, &times)?;
    // Loading the file back catches anything the writer and reader disagree on.
    data::load_csv(&data_path, 0, data::CsvOptions { has_header: true })
        .map_err(|e| CliError::runtime(format!("re-reading {}: {e}", data_path.display())))?;
    Ok(GenDataReport {
        data: data_path,
        speeds: speeds_path,
    })
}
