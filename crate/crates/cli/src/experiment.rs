//! Turning a resolved config into problems and traces.

use flanp_core::data::{self, CsvOptions, DatasetSpec};
use flanp_core::flanp::{self, Algorithm, Problem, RunConfig, Trace};
use flanp_core::hetero::{self, Fleet, SpeedKind, SpeedModel};
use flanp_core::losses::{LossSpec, Shard};
use flanp_core::solvers::{self, AccuracyBudget};
use flanp_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, ExperimentConfig, SpeedSource};
use crate::error::{CliError, CliResult};

/// Trials used when `σ²` is estimated instead of given.
pub const SIGMA2_TRIALS: usize = 200;

/// Independent seeds for one replica, derived from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaSeeds {
    pub data: u64,
    pub speeds: u64,
    pub partition: u64,
    pub run: u64,
}

impl ReplicaSeeds {
    pub fn derive(seed: u64, replica: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replica as u64);
        Self {
            data: rng.random(),
            speeds: rng.random(),
            partition: rng.random(),
            run: rng.random(),
        }
    }
}

/// Shards in original client order.
pub fn load_shards(cfg: &ExperimentConfig, seeds: &ReplicaSeeds) -> CliResult<Vec<Shard>> {
    match &cfg.data {
        DataSource::Synthetic {
            task,
            dim,
            nodes,
            samples_per_node,
            noise_std,
        } => {
            let spec = DatasetSpec {
                dim: *dim,
                nodes: *nodes,
                samples_per_node: *samples_per_node,
                noise_std: *noise_std,
                seed: seeds.data,
            };
            data::generate_synthetic(&spec, *task)
                .map(|d| d.shards)
                .map_err(|e| CliError::config(format!("data: {e}")))
        }
        DataSource::Csv {
            path,
            label_column,
            has_header,
            nodes,
            samples_per_node,
        } => {
            let samples = data::load_csv(path, *label_column, CsvOptions { has_header: *has_header })
                .map_err(|e| CliError::config(format!("data: {e}")))?;
            data::partition(samples, *nodes, *samples_per_node, seeds.partition)
                .map(|p| p.shards)
                .map_err(|e| CliError::config(format!("data: {e}")))
        }
    }
}

pub fn load_fleet(cfg: &ExperimentConfig, seeds: &ReplicaSeeds) -> CliResult<Fleet> {
    let n = cfg.data.nodes();
    let kind = match &cfg.speeds {
        SpeedSource::UniformInterval { lo, hi } => SpeedKind::UniformInterval { lo: *lo, hi: *hi },
        SpeedSource::IidExponential { rate } => SpeedKind::IidExponential { rate: *rate },
        SpeedSource::Explicit { times } => SpeedKind::Explicit { times: times.clone() },
        SpeedSource::File { path } => SpeedKind::Explicit {
            times: hetero::load_speed_file(path).map_err(|e| CliError::config(format!("speeds: {e}")))?,
        },
    };
    hetero::sample_fleet(&SpeedModel::new(kind, seeds.speeds), n).map_err(|e| CliError::config(format!("speeds: {e}")))
}

fn dim_of(shards: &[Shard]) -> usize {
    shards.first().map_or(0, Shard::dim)
}

/// A replica's problem together with the accuracy budget it runs under.
pub struct Setup {
    pub problem: Problem,
    pub budget: AccuracyBudget,
    pub run_config: RunConfig,
}

pub fn setup(cfg: &ExperimentConfig, replica: usize) -> CliResult<Setup> {
    let seeds = ReplicaSeeds::derive(cfg.seed, replica);
    let shards = load_shards(cfg, &seeds)?;
    let fleet = load_fleet(cfg, &seeds)?;
    let spec = LossSpec::new(cfg.loss.kind, cfg.loss.reg, dim_of(&shards)).map_err(|e| CliError::config(format!("loss: {e}")))?;
    let problem = Problem::new(spec, shards, fleet).map_err(|e| CliError::config(format!("data: {e}")))?;

    let c = match cfg.c {
        Some(c) => c,
        None => flanp::calibrate_c(&problem, cfg.n0).map_err(|e| CliError::runtime(format!("calibrating c: {e}")))?,
    };
    let sigma2 = match cfg.sigma2 {
        Some(v) => v,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.run);
            rng.set_stream(u64::MAX);
            let w0 = vec![0.0; problem.spec().dim];
            solvers::estimate_sigma2(
                problem.spec(),
                &problem.prefix(problem.nodes()),
                &w0,
                cfg.sampling,
                SIGMA2_TRIALS,
                &mut rng,
            )
            .map_err(|e| CliError::runtime(format!("estimating sigma2: {e}")))?
        }
    };
    let budget = AccuracyBudget { c, sigma2 };
    let mut run_config = RunConfig::new(budget, cfg.n0, seeds.run);
    run_config.mode = cfg.mode;
    run_config.solver = cfg.solver;
    run_config.sampling = cfg.sampling;
    run_config.comm_cost = cfg.comm_cost;
    run_config.charge_gradient_upload = cfg.charge_gradient_upload;
    run_config.max_rounds_per_stage = cfg.max_rounds_per_stage;
    run_config.step_override = cfg.step_override;
    Ok(Setup {
        problem,
        budget,
        run_config,
    })
}

/// One algorithm's result within a replica.
pub struct Outcome {
    pub algorithm: Algorithm,
    pub result: Result<Trace, Error>,
}

impl Outcome {
    pub fn name(&self) -> String {
        match &self.result {
            Ok(t) => t.algorithm.clone(),
            Err(e) => e
                .partial_trace()
                .map_or_else(|| self.algorithm.name(), |t| t.algorithm.clone()),
        }
    }

    /// The completed trace, or whatever was recorded before the failure.
    pub fn trace(&self) -> Option<&Trace> {
        match &self.result {
            Ok(t) => Some(t),
            Err(e) => e.partial_trace(),
        }
    }
}

pub struct ReplicaResult {
    pub replica: usize,
    pub budget: AccuracyBudget,
    pub outcomes: Vec<Outcome>,
}

/// Runs FLANP and every baseline on one replica's problem, sequentially and
/// in config order.
pub fn run_replica(cfg: &ExperimentConfig, replica: usize) -> CliResult<ReplicaResult> {
    let setup = setup(cfg, replica)?;
    let outcomes = cfg
        .algorithms()
        .into_iter()
        .map(|algorithm| Outcome {
            algorithm,
            result: flanp::run(&setup.problem, &setup.run_config, algorithm),
        })
        .collect();
    Ok(ReplicaResult {
        replica,
        budget: setup.budget,
        outcomes,
    })
}

/// Runs `f` on a pool of `jobs` threads (0 = rayon's default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replica_seeds_differ_and_repeat() {
        let a = ReplicaSeeds::derive(5, 0);
        let b = ReplicaSeeds::derive(5, 1);
        assert_ne!(a, b);
        assert_eq!(a, ReplicaSeeds::derive(5, 0));
        assert_ne!(a.data, a.speeds);
    }
}
