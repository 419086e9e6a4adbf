//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use flanp_core::data::TaskKind;
use flanp_core::flanp::{Algorithm, PartialPick, SolverKind, StepOverride, StopMode};
use flanp_core::losses::{LossKind, Sampling};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Overrides the config seed; `--seed` overrides both.
pub const SEED_ENV: &str = "FLANP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    pub loss: LossConfig,
    pub speeds: SpeedSource,
    /// Statistical-accuracy constant; calibrated from the data when absent.
    #[serde(default)]
    pub c: Option<f64>,
    /// Gradient-noise bound; estimated at the initial model when absent.
    #[serde(default)]
    pub sigma2: Option<f64>,
    #[serde(default = "default_n0")]
    pub n0: usize,
    #[serde(default = "default_mode")]
    pub mode: StopMode,
    #[serde(default = "default_solver")]
    pub solver: SolverKind,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    #[serde(default)]
    pub comm_cost: f64,
    #[serde(default)]
    pub charge_gradient_upload: bool,
    #[serde(default = "default_max_rounds")]
    pub max_rounds_per_stage: usize,
    #[serde(default)]
    pub step_override: Option<StepOverride>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_n0() -> usize {
    1
}

fn default_mode() -> StopMode {
    StopMode::Criterion
}

fn default_solver() -> SolverKind {
    SolverKind::Fedgate
}

fn default_sampling() -> Sampling {
    Sampling::FullPass
}

fn default_max_rounds() -> usize {
    10_000
}

fn default_replicas() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_task() -> TaskKind {
    TaskKind::Regression
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default = "default_task")]
        task: TaskKind,
        dim: usize,
        nodes: usize,
        samples_per_node: usize,
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        /// Zero-based index of the label column.
        label_column: usize,
        #[serde(default = "default_true")]
        has_header: bool,
        nodes: usize,
        samples_per_node: usize,
    },
}

impl DataSource {
    pub fn nodes(&self) -> usize {
        match self {
            DataSource::Synthetic { nodes, .. } | DataSource::Csv { nodes, .. } => *nodes,
        }
    }

    pub fn samples_per_node(&self) -> usize {
        match self {
            DataSource::Synthetic { samples_per_node, .. } | DataSource::Csv { samples_per_node, .. } => {
                *samples_per_node
            }
        }
    }

    fn set_nodes(&mut self, n: usize) {
        match self {
            DataSource::Synthetic { nodes, .. } | DataSource::Csv { nodes, .. } => *nodes = n,
        }
    }

    fn set_samples_per_node(&mut self, s: usize) {
        match self {
            DataSource::Synthetic { samples_per_node, .. } | DataSource::Csv { samples_per_node, .. } => {
                *samples_per_node = s
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default)]
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeedSource {
    UniformInterval { lo: f64, hi: f64 },
    IidExponential { rate: f64 },
    Explicit { times: Vec<f64> },
    /// JSON array of unit times, one per client.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    Flanp,
    FedgateFull,
    FedavgFull,
    FednovaFull,
    PartialRandom { k: usize },
    PartialFastest { k: usize },
    Heuristic { theta0: f64 },
}

impl Baseline {
    pub fn algorithm(&self) -> Algorithm {
        match *self {
            Baseline::Flanp => Algorithm::Flanp,
            Baseline::FedgateFull => Algorithm::Full { solver: SolverKind::Fedgate },
            Baseline::FedavgFull => Algorithm::Full { solver: SolverKind::Fedavg },
            Baseline::FednovaFull => Algorithm::Full { solver: SolverKind::Fednova },
            Baseline::PartialRandom { k } => Algorithm::Partial { k, pick: PartialPick::Random },
            Baseline::PartialFastest { k } => Algorithm::Partial { k, pick: PartialPick::Fastest },
            Baseline::Heuristic { theta0 } => Algorithm::Heuristic { theta0 },
        }
    }
}

/// Values substituted for the number of clients, samples per client, and
/// the exponential speed rate. Points are the Cartesian product in that
/// order of nesting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub samples_per_node: Vec<usize>,
    #[serde(default)]
    pub rate: Vec<f64>,
}

impl Sweep {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.samples_per_node.is_empty() && self.rate.is_empty()
    }
}

/// One sweep point: the axis values that produced it and the resolved config.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axes: Vec<(&'static str, String)>,
    pub config: ExperimentConfig,
}

impl SweepPoint {
    pub fn axis_names(&self) -> String {
        if self.axes.is_empty() {
            "none".into()
        } else {
            self.axes.iter().map(|(k, _)| *k).collect::<Vec<_>>().join("+")
        }
    }

    pub fn axis_values(&self) -> String {
        if self.axes.is_empty() {
            "-".into()
        } else {
            self.axes.iter().map(|(_, v)| v.as_str()).collect::<Vec<_>>().join("+")
        }
    }
}

impl ExperimentConfig {
    /// Reads, resolves relative paths against the config's directory, and
    /// validates.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Csv { path, .. } = &mut self.data {
            fix(path);
        }
        if let SpeedSource::File { path } = &mut self.speeds {
            fix(path);
        }
        fix(&mut self.output_dir);
    }

    /// Seed precedence: explicit flag, then the environment, then the file.
    pub fn apply_seed_override(&mut self, flag: Option<u64>) -> CliResult<()> {
        if let Some(seed) = flag {
            self.seed = seed;
            return Ok(());
        }
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("{SEED_ENV}: not an unsigned integer: {raw:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, msg: String| Err(CliError::config(format!("{field}: {msg}")));
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return bad(
                "experiment_id",
                format!("must be nonempty and use only letters, digits, '-', '_' or '.', got {:?}", self.experiment_id),
            );
        }
        if self.replicas == 0 {
            return bad("replicas", "must be at least 1".into());
        }
        if self.max_rounds_per_stage == 0 {
            return bad("max_rounds_per_stage", "must be at least 1".into());
        }
        if !(self.comm_cost.is_finite() && self.comm_cost >= 0.0) {
            return bad("comm_cost", format!("must be finite and nonnegative, got {}", self.comm_cost));
        }
        if let Some(c) = self.c {
            if !(c.is_finite() && c > 0.0) {
                return bad("c", format!("must be positive, got {c}"));
            }
        }
        if let Some(s2) = self.sigma2 {
            if !(s2.is_finite() && s2 >= 0.0) {
                return bad("sigma2", format!("must be nonnegative, got {s2}"));
            }
        }
        if let Some(o) = self.step_override {
            if !(o.eta.is_finite() && o.eta > 0.0 && o.gamma.is_finite() && o.gamma > 0.0) {
                return bad("step_override", "eta and gamma must be positive".into());
            }
        }
        self.validate_loss()?;
        if self.n0 == 0 {
            return bad("n0", "must be at least 1".into());
        }
        for b in &self.baselines {
            if let Baseline::Heuristic { theta0 } = b {
                if !(theta0.is_finite() && *theta0 > 0.0) {
                    return bad("baselines", format!("heuristic theta0 must be positive, got {theta0}"));
                }
            }
        }
        if self.sweep.nodes.contains(&0) || self.sweep.samples_per_node.contains(&0) {
            return bad("sweep", "node and sample counts must be at least 1".into());
        }
        if !self.sweep.rate.is_empty() {
            if !matches!(self.speeds, SpeedSource::IidExponential { .. }) {
                return bad("sweep.rate", "only applies to iid_exponential speeds".into());
            }
            if let Some(r) = self.sweep.rate.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
                return bad("sweep.rate", format!("rates must be positive, got {r}"));
            }
        }
        for point in self.points() {
            point.config.validate_point()?;
        }
        Ok(())
    }

    fn validate_loss(&self) -> CliResult<()> {
        let reg = self.loss.reg;
        if !(reg.is_finite() && reg >= 0.0) {
            return Err(CliError::config(format!("loss.reg: must be finite and nonnegative, got {reg}")));
        }
        if self.loss.kind == LossKind::RegLogistic {
            if reg <= 0.0 {
                return Err(CliError::config("loss.reg: logistic loss needs reg > 0"));
            }
            if let DataSource::Synthetic { task: TaskKind::Regression, .. } = self.data {
                return Err(CliError::config("data.task: logistic loss needs classification data"));
            }
        }
        Ok(())
    }

    /// Checks that depend on the number of clients and samples.
    fn validate_point(&self) -> CliResult<()> {
        let n = self.data.nodes();
        let s = self.data.samples_per_node();
        match &self.data {
            DataSource::Synthetic { dim, noise_std, .. } => {
                if *dim == 0 {
                    return Err(CliError::config("data.dim: must be at least 1"));
                }
                if !(noise_std.is_finite() && *noise_std >= 0.0) {
                    return Err(CliError::config("data.noise_std: must be finite and nonnegative"));
                }
            }
            DataSource::Csv { .. } => {}
        }
        if n == 0 {
            return Err(CliError::config("data.nodes: must be at least 1"));
        }
        if s == 0 {
            return Err(CliError::config("data.samples_per_node: must be at least 1"));
        }
        if self.n0 > n {
            return Err(CliError::config(format!("n0 exceeds N (n0 = {}, N = {n})", self.n0)));
        }
        if self.c.is_none() && self.n0 >= n {
            return Err(CliError::config(
                "c: calibration needs n0 < N; set c explicitly for a single-stage run",
            ));
        }
        if let Sampling::WithReplacement { batch_size } = self.sampling {
            if batch_size == 0 || batch_size > s {
                return Err(CliError::config(format!(
                    "sampling.batch_size: must lie in 1..={s}, got {batch_size}"
                )));
            }
        }
        match &self.speeds {
            SpeedSource::UniformInterval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi) {
                    return Err(CliError::config(format!("speeds: need 0 < lo < hi, got [{lo}, {hi}]")));
                }
            }
            SpeedSource::IidExponential { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(CliError::config(format!("speeds.rate: must be positive, got {rate}")));
                }
            }
            SpeedSource::Explicit { times } => {
                if times.len() != n {
                    return Err(CliError::config(format!(
                        "speeds.times: {} entries for {n} clients",
                        times.len()
                    )));
                }
                if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
                    return Err(CliError::config(format!("speeds.times: must be positive, got {t}")));
                }
            }
            SpeedSource::File { .. } => {}
        }
        for b in &self.baselines {
            if let Baseline::PartialRandom { k } | Baseline::PartialFastest { k } = b {
                if *k == 0 || *k > n {
                    return Err(CliError::config(format!("baselines: k = {k} outside 1..={n}")));
                }
            }
        }
        Ok(())
    }

    /// The sweep's Cartesian product, or the config itself when no axis is set.
    pub fn points(&self) -> Vec<SweepPoint> {
        fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
            if values.is_empty() {
                vec![None]
            } else {
                values.iter().copied().map(Some).collect()
            }
        }
        let mut points = Vec::new();
        for n in axis(&self.sweep.nodes) {
            for s in axis(&self.sweep.samples_per_node) {
                for rate in axis(&self.sweep.rate) {
                    let mut config = self.clone();
                    config.sweep = Sweep::default();
                    let mut axes = Vec::new();
                    if let Some(n) = n {
                        config.data.set_nodes(n);
                        axes.push(("nodes", n.to_string()));
                    }
                    if let Some(s) = s {
                        config.data.set_samples_per_node(s);
                        axes.push(("samples_per_node", s.to_string()));
                    }
                    if let Some(r) = rate {
                        config.speeds = SpeedSource::IidExponential { rate: r };
                        axes.push(("rate", r.to_string()));
                    }
                    points.push(SweepPoint { axes, config });
                }
            }
        }
        points
    }

    /// FLANP first, then the baselines in file order.
    pub fn algorithms(&self) -> Vec<Algorithm> {
        let mut algs = vec![Algorithm::Flanp];
        algs.extend(self.baselines.iter().map(Baseline::algorithm));
        algs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "experiment_id": "t",
            "data": {"kind": "synthetic", "dim": 3, "nodes": 4, "samples_per_node": 10, "noise_std": 0.1},
            "loss": {"kind": "ridge_linear"},
            "speeds": {"kind": "uniform_interval", "lo": 1, "hi": 2}
        }"#
    }

    #[test]
    fn defaults_fill_in() {
        let cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.n0, 1);
        assert_eq!(cfg.replicas, 1);
        assert_eq!(cfg.mode, StopMode::Criterion);
        assert_eq!(cfg.points().len(), 1);
        assert_eq!(cfg.algorithms(), vec![Algorithm::Flanp]);
    }

    #[test]
    fn unknown_field_is_named() {
        let text = minimal().replace("\"n", "\"bogus\": 1, \"n");
        let err = serde_json::from_str::<ExperimentConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn n0_above_n_rejected() {
        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.n0 = 5;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("n0 exceeds N"));
    }

    #[test]
    fn sweep_points_nest_in_order() {
        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.sweep.nodes = vec![4, 8];
        cfg.sweep.samples_per_node = vec![5, 10, 20];
        let points = cfg.points();
        assert_eq!(points.len(), 6);
        assert_eq!(points[1].axis_values(), "4+10");
        assert_eq!(points[3].config.data.nodes(), 8);
        assert_eq!(points[0].axis_names(), "nodes+samples_per_node");
        cfg.sweep.rate = vec![1.0];
        assert!(cfg.validate().unwrap_err().to_string().contains("sweep.rate"));
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.replicas = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("replicas"));
        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.baselines = vec![Baseline::PartialRandom { k: 9 }];
        assert!(cfg.validate().unwrap_err().to_string().contains("baselines"));
        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.loss.kind = LossKind::RegLogistic;
        cfg.loss.reg = 0.1;
        assert!(cfg.validate().unwrap_err().to_string().contains("data.task"));
    }

    #[test]
    fn seed_flag_wins() {
        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.apply_seed_override(Some(77)).unwrap();
        assert_eq!(cfg.seed, 77);
    }
}
