use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flanp_cli::commands::{self, replica_mean, OracleOptions};
use flanp_cli::config::ExperimentConfig;
use flanp_cli::error::CliError;
use flanp_cli::output::TRACE_HEADER;

const BASE: &str = r#"
  "data": {"kind": "synthetic", "dim": 3, "nodes": 8, "samples_per_node": 20, "noise_std": 0.3},
  "loss": {"kind": "ridge_linear", "reg": 0.05},
  "speeds": {"kind": "uniform_interval", "lo": 1.0, "hi": 10.0}
"#;

fn write_config(dir: &Path, id: &str, extra: &str) -> PathBuf {
    let path = dir.join(format!("{id}.json"));
    let extra = if extra.is_empty() { String::new() } else { format!(",\n{extra}") };
    std::fs::write(&path, format!("{{\n\"experiment_id\": \"{id}\", \"seed\": 1,{BASE}{extra}\n}}")).unwrap();
    path
}

fn flanp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flanp"))
        .args(args)
        .env_remove("FLANP_SEED")
        .output()
        .unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_exact_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "minimal", "");
    let out = dir.path().join("out");
    let res = flanp(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let text = std::fs::read_to_string(out.join("minimal.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "experiment_id,algorithm,stage_n,round,sim_time,grad_norm_sq,subopt,participants"
    );
    assert_eq!(TRACE_HEADER.join(","), "experiment_id,algorithm,stage_n,round,sim_time,grad_norm_sq,subopt,participants");
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 8, "{row}");
        assert_eq!(cells[0], "minimal");
        for cell in &cells[2..] {
            let v: f64 = cell.parse().unwrap();
            assert!(v.is_finite());
        }
    }

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("minimal.summary.json")).unwrap()).unwrap();
    let run = &summary["runs"][0];
    assert_eq!(run["algorithm"], "flanp");
    assert_eq!(run["status"], "ok");
    assert!(run["total_sim_time"].as_f64().unwrap() > 0.0);
    assert!(run["final_model_norm"].as_f64().unwrap() > 0.0);
    assert_eq!(run["stages"].as_array().unwrap().len(), 4);
}

#[test]
fn n0_above_n_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad", "\"n0\": 9");
    let res = flanp(&["run", "--config", path_str(&cfg), "--out", path_str(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("n0 exceeds N"));
}

#[test]
fn unknown_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo", "\"replicaz\": 2");
    let res = flanp(&["run", "--config", path_str(&cfg)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("replicaz"));
}

#[test]
fn stage_cap_failure_writes_partial_trace_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "capped", "\"max_rounds_per_stage\": 1, \"c\": 1e-6");
    let out = dir.path().join("out");
    let res = flanp(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));

    let text = std::fs::read_to_string(out.join("capped.csv")).unwrap();
    assert!(text.lines().count() > 1);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("capped.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"][0]["status"], "failed");
    assert!(summary["runs"][0]["error"].as_str().unwrap().contains("round"));
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeded", "");
    let run = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let out = dir.path().join(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_flanp"));
        cmd.args(["run", "--config", path_str(&cfg), "--out", path_str(&out)]);
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        cmd.env_remove("FLANP_SEED");
        if let Some(e) = env {
            cmd.env("FLANP_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(out.join("seeded.csv")).unwrap()
    };
    let file_seed = run("a", None, None);
    let env_seed = run("b", None, Some("7"));
    let flag_seed = run("c", Some("7"), Some("99"));
    assert_ne!(file_seed, env_seed);
    assert_eq!(env_seed, flag_seed);
}

#[test]
fn self_comparison_is_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "self", "\"replicas\": 3, \"baselines\": [{\"kind\": \"flanp\"}]");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let report = commands::cmd_compare(&cfg, dir.path(), 0, false).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].ratio, 1.0);
    assert_eq!(report.rows[0].axis, "none");
    assert!(dir.path().join("self.compare.csv").exists());
}

#[test]
fn compare_requires_a_baseline_and_sweep_an_axis() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "nobase", "");
    let res = flanp(&["compare", "--config", path_str(&path)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("baselines"));

    let path = write_config(dir.path(), "noaxis", "\"baselines\": [{\"kind\": \"fedgate_full\"}]");
    let res = flanp(&["sweep", "--config", path_str(&path)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("sweep"));
}

#[test]
fn compare_means_match_per_replica_totals() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "\"replicas\": 4, \"baselines\": [{\"kind\": \"fedgate_full\"}], \"sweep\": {\"nodes\": [4, 8]}";
    let path = write_config(dir.path(), "means", extra);
    let cfg = ExperimentConfig::load(&path).unwrap();
    let report = commands::cmd_compare(&cfg, dir.path(), 2, true).unwrap();
    assert_eq!(report.rows.len(), 2);

    for (point, row) in cfg.points().iter().zip(&report.rows) {
        let mut flanp_t = Vec::new();
        let mut full_t = Vec::new();
        for r in 0..cfg.replicas {
            let res = flanp_cli::experiment::run_replica(&point.config, r).unwrap();
            flanp_t.push(res.outcomes[0].trace().unwrap().total_time);
            full_t.push(res.outcomes[1].trace().unwrap().total_time);
        }
        assert_eq!(row.t_flanp, replica_mean(&flanp_t));
        assert_eq!(row.t_baseline, replica_mean(&full_t));
        assert_eq!(row.ratio, row.t_flanp / row.t_baseline);
        assert_eq!(row.value, point.config.data.nodes().to_string());
    }
    assert!(report.table.lines().count() == 3);
}

#[test]
fn replica_mean_is_plain_ordered_sum() {
    let v = [0.1, 0.2, 0.3, 1e16, -1e16];
    assert_eq!(replica_mean(&v), (0.1 + 0.2 + 0.3 + 1e16 - 1e16) / 5.0);
}

#[test]
fn oracle_passes_and_reports_deviations() {
    let report = commands::cmd_oracle(OracleOptions {
        max_n: 16,
        trials: 20_000,
        seed: 3,
    })
    .unwrap();
    assert!(report.all_pass(), "{}", report.render());
    for line in report.render().lines() {
        assert!(line.starts_with("PASS"));
        assert!(line.contains("abs_dev=") && line.contains("rel_dev="));
    }
}

#[test]
fn oracle_rejects_zero_fleet() {
    let err = commands::cmd_oracle(OracleOptions {
        max_n: 0,
        trials: 10,
        seed: 0,
    })
    .unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    let res = flanp(&["oracle", "--max-n", "0"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn generated_data_loads_back_through_a_csv_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gen", "");
    let out = dir.path().join("gen-out");
    let res = flanp(&["gen-data", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let header = std::fs::read_to_string(out.join("gen.data.csv")).unwrap();
    assert!(header.starts_with("y,x1,x2,x3\n"));
    assert_eq!(header.lines().count(), 1 + 8 * 20);
    let times: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(out.join("gen.speeds.json")).unwrap()).unwrap();
    assert_eq!(times.len(), 8);

    let csv_cfg = dir.path().join("from-csv.json");
    std::fs::write(
        &csv_cfg,
        r#"{
  "experiment_id": "from-csv",
  "data": {"kind": "csv", "path": "gen-out/gen.data.csv", "label_column": 0, "nodes": 8, "samples_per_node": 20},
  "loss": {"kind": "ridge_linear", "reg": 0.05},
  "speeds": {"kind": "file", "path": "gen-out/gen.speeds.json"}
}"#,
    )
    .unwrap();
    let res = flanp(&["run", "--config", path_str(&csv_cfg), "--out", path_str(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("from-csv.csv").exists());
}

#[test]
fn gen_data_needs_synthetic_source() {
    let dir = tempfile::tempdir().unwrap();
    let csv_cfg = dir.path().join("c.json");
    std::fs::write(dir.path().join("d.csv"), "y,x1\n1,2\n3,4\n").unwrap();
    std::fs::write(
        &csv_cfg,
        r#"{
  "experiment_id": "c",
  "data": {"kind": "csv", "path": "d.csv", "label_column": 0, "nodes": 2, "samples_per_node": 1},
  "loss": {"kind": "ridge_linear", "reg": 0.05},
  "speeds": {"kind": "explicit", "times": [1.0, 2.0]}
}"#,
    )
    .unwrap();
    let res = flanp(&["gen-data", "--config", path_str(&csv_cfg), "--out", path_str(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
}
