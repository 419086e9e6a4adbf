//! Fast-to-slow adaptive participation and the baselines it is compared with.
//!
//! A run starts with the `n0` fastest clients, solves their empirical risk to
//! its statistical accuracy, then doubles the cohort (clamped at `N`) and
//! warm-starts the next stage from the previous model. Baselines run a single
//! stage over all clients, over a fixed fastest subset, or over a fresh random
//! subset every round.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetero::Fleet;
use crate::losses::{self, CurvatureConstants, LossSpec, Model, Sampling, Shard};
use crate::simclock::ClockLedger;
use crate::solvers::{
    self, AccuracyBudget, BenchmarkInit, SolverParams, SolverState,
};
use crate::vector;

/// Participant counts `[n0, min(2n0, N), …, N]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    sizes: Vec<usize>,
}

impl StageSchedule {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}

pub fn schedule(n0: usize, n: usize) -> Result<StageSchedule> {
    if n0 == 0 {
        return Err(Error::invalid("n0 must be at least 1"));
    }
    if n0 > n {
        return Err(Error::invalid(format!("n0 exceeds N ({n0} > {n})")));
    }
    let mut sizes = vec![n0];
    let mut cur = n0;
    while cur < n {
        cur = (2 * cur).min(n);
        sizes.push(cur);
    }
    Ok(StageSchedule { sizes })
}

/// `2·μ·V_ns = 2·μ·c/(n·s)`, the gradient-norm level at which a stage with
/// `n` participants has reached statistical accuracy.
pub fn accuracy_threshold(n: usize, s: usize, budget: &AccuracyBudget, mu: f64) -> Result<f64> {
    budget.validate()?;
    if n == 0 || s == 0 {
        return Err(Error::invalid("n and s must be at least 1"));
    }
    Ok(2.0 * mu * budget.v(n * s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// Leave a stage once `‖∇L_n(w)‖² ≤ 2μV_ns`.
    Criterion,
    /// Run exactly the formula's `R` rounds per stage.
    FixedR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Fedgate,
    Fedavg,
    Fednova,
}

/// Replaces the formula stepsizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOverride {
    pub eta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub budget: AccuracyBudget,
    pub n0: usize,
    pub mode: StopMode,
    pub solver: SolverKind,
    pub sampling: Sampling,
    /// Simulated time added to every round.
    pub comm_cost: f64,
    /// Charge the per-round gradient upload for the stopping test as one
    /// extra local update of the slowest participant.
    pub charge_gradient_upload: bool,
    /// Criterion-mode cap on rounds in one stage.
    pub max_rounds_per_stage: usize,
    pub seed: u64,
    /// Curvature used for stepsizes and thresholds. When absent, the run
    /// computes the envelope over every cohort it trains on.
    pub curvature: Option<CurvatureConstants>,
    pub step_override: Option<StepOverride>,
}

impl RunConfig {
    pub fn new(budget: AccuracyBudget, n0: usize, seed: u64) -> Self {
        Self {
            budget,
            n0,
            mode: StopMode::Criterion,
            solver: SolverKind::Fedgate,
            sampling: Sampling::FullPass,
            comm_cost: 0.0,
            charge_gradient_upload: false,
            max_rounds_per_stage: 10_000,
            seed,
            curvature: None,
            step_override: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.budget.validate()?;
        schedule(self.n0, n)?;
        if self.max_rounds_per_stage == 0 {
            return Err(Error::invalid("max_rounds_per_stage must be at least 1"));
        }
        if !(self.comm_cost.is_finite() && self.comm_cost >= 0.0) {
            return Err(Error::invalid(format!(
                "comm_cost must be finite and nonnegative, got {}",
                self.comm_cost
            )));
        }
        if let Some(o) = self.step_override {
            if !(o.eta.is_finite() && o.eta > 0.0 && o.gamma.is_finite() && o.gamma > 0.0) {
                return Err(Error::invalid("step override needs positive eta and gamma"));
            }
        }
        Ok(())
    }
}

/// Shards ordered fastest client first, with cached oracles for every cohort
/// `{1..n}`.
#[derive(Debug)]
pub struct Problem {
    spec: LossSpec,
    shards: Vec<Shard>,
    fleet: Fleet,
    optima: Mutex<BTreeMap<usize, (Model, f64)>>,
    curvatures: Mutex<BTreeMap<usize, CurvatureConstants>>,
}

impl Problem {
    /// `shards[i]` belongs to the client with original index `i`.
    pub fn new(spec: LossSpec, shards: Vec<Shard>, fleet: Fleet) -> Result<Self> {
        spec.validate()?;
        if shards.is_empty() {
            return Err(Error::Empty("shard list"));
        }
        if shards.len() != fleet.len() {
            return Err(Error::invalid(format!(
                "{} shards for a fleet of {} clients",
                shards.len(),
                fleet.len()
            )));
        }
        let s = shards[0].len();
        for shard in &shards {
            if shard.dim() != spec.dim {
                return Err(Error::DimensionMismatch {
                    expected: spec.dim,
                    got: shard.dim(),
                });
            }
            if shard.len() != s {
                return Err(Error::invalid("all shards must hold the same number of samples"));
            }
        }
        spec.check_labels(&shards)?;
        let mut slots: Vec<Option<Shard>> = shards.into_iter().map(Some).collect();
        let ordered = fleet
            .permutation()
            .into_iter()
            .map(|i| slots[i].take().expect("fleet permutation indices are distinct"))
            .collect();
        Ok(Self {
            spec,
            shards: ordered,
            fleet,
            optima: Mutex::new(BTreeMap::new()),
            curvatures: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    /// Shards in fleet order.
    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn nodes(&self) -> usize {
        self.shards.len()
    }

    pub fn samples_per_node(&self) -> usize {
        self.shards[0].len()
    }

    /// The `n` fastest clients' shards.
    pub fn prefix(&self, n: usize) -> Vec<&Shard> {
        self.shards[..n].iter().collect()
    }

    fn check_prefix(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.nodes() {
            return Err(Error::invalid(format!("cohort size {n} outside 1..={}", self.nodes())));
        }
        Ok(())
    }

    /// `(w*_n, L_n(w*_n))` for the `n` fastest clients.
    pub fn prefix_optimum(&self, n: usize) -> Result<(Model, f64)> {
        self.check_prefix(n)?;
        if let Some(hit) = self.optima.lock().expect("oracle cache poisoned").get(&n) {
            return Ok(hit.clone());
        }
        let shards = self.prefix(n);
        let w = losses::optimum(&self.spec, &shards)?;
        let risk = losses::empirical_risk(&self.spec, &w, &shards)?;
        self.optima
            .lock()
            .expect("oracle cache poisoned")
            .insert(n, (w.clone(), risk));
        Ok((w, risk))
    }

    pub fn prefix_curvature(&self, n: usize) -> Result<CurvatureConstants> {
        self.check_prefix(n)?;
        if let Some(hit) = self.curvatures.lock().expect("curvature cache poisoned").get(&n) {
            return Ok(*hit);
        }
        let c = losses::curvature(&self.spec, &self.prefix(n))?;
        self.curvatures.lock().expect("curvature cache poisoned").insert(n, c);
        Ok(c)
    }
}

/// Initial-point quantities over all `N` clients.
pub fn benchmark_init(problem: &Problem, w0: &[f64]) -> Result<BenchmarkInit> {
    let n = problem.nodes();
    let all = problem.prefix(n);
    let (_, opt) = problem.prefix_optimum(n)?;
    let delta0 = losses::empirical_risk(problem.spec(), w0, &all)? - opt;
    let mut grads = Vec::with_capacity(n);
    for shard in &all {
        grads.push(vector::norm_sq(&losses::local_gradient(problem.spec(), w0, shard)?));
    }
    Ok(BenchmarkInit {
        delta0,
        delta0_prime: vector::running_mean_scalar(grads),
    })
}

/// `c` such that `V_{n0·s}` equals the gap `L_N(w*_{n0}) − L_N(w*_N)`.
pub fn calibrate_c(problem: &Problem, n0: usize) -> Result<f64> {
    let n = problem.nodes();
    if n0 == 0 || n0 >= n {
        return Err(Error::invalid(format!("calibration needs 1 <= n0 < N, got n0 = {n0}, N = {n}")));
    }
    let (w_small, _) = problem.prefix_optimum(n0)?;
    let (_, opt) = problem.prefix_optimum(n)?;
    let gap = losses::empirical_risk(problem.spec(), &w_small, &problem.prefix(n))? - opt;
    if !(gap > 0.0) {
        return Err(Error::invalid(format!("calibration gap {gap:e} is not positive")));
    }
    Ok((n0 * problem.samples_per_node()) as f64 * gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartBounds {
    /// Bound on `L_n(w_m) − L_n(w*_n)`.
    pub subopt: f64,
    /// Bound on `‖∇L_n(w_m)‖²`.
    pub global_grad: f64,
    /// Bound on a single client's `‖∇L^i(w_m)‖²`.
    pub local_grad: f64,
}

/// Quality of a stage-`m` solution as a starting point for stage `n`.
pub fn warm_start_bounds(n: usize, m: usize, s: usize, budget: &AccuracyBudget, mu: f64) -> Result<WarmStartBounds> {
    budget.validate()?;
    if m == 0 || m > n || s == 0 {
        return Err(Error::invalid(format!("need 1 <= m <= n and s >= 1, got m = {m}, n = {n}, s = {s}")));
    }
    let frac = (n - m) as f64 / n as f64;
    let v_rest = budget.v((n - m) * s);
    let v_m = budget.v(m * s);
    let v_s = budget.v(s);
    let root = v_rest.sqrt() + v_m.sqrt();
    Ok(WarmStartBounds {
        subopt: 2.0 * frac * (v_rest + v_m) + v_m,
        global_grad: 2.0 * frac * frac * root * root + 4.0 * mu * v_m,
        local_grad: 3.0 * (2.0 * mu + 1.0) * v_m + 3.0 * v_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub stage_n: usize,
    /// Rounds completed in this stage; 0 is the stage's starting point.
    pub round: usize,
    /// Cumulative simulated time.
    pub sim_time: f64,
    pub grad_norm_sq: f64,
    pub subopt: f64,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub n: usize,
    pub rounds: usize,
    /// Index of the stage's round-0 record.
    pub first_record: usize,
    pub threshold: Option<f64>,
    pub params: SolverParams,
    /// Whether the stepsizes meet `2ηγτL = 1` and `30η²L²τ² ≤ 1`.
    pub feasible: bool,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub algorithm: String,
    pub records: Vec<RoundRecord>,
    pub stages: Vec<StageSummary>,
    pub final_model: Model,
    pub total_time: f64,
    pub curvature: CurvatureConstants,
}

impl Trace {
    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.n).collect()
    }

    pub fn last_record(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    pub fn total_rounds(&self) -> usize {
        self.stages.iter().map(|s| s.rounds).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialPick {
    Random,
    Fastest,
}

/// Every algorithm a run can execute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    Flanp,
    Full { solver: SolverKind },
    Partial { k: usize, pick: PartialPick },
    Heuristic { theta0: f64 },
}

impl Algorithm {
    pub fn name(&self) -> String {
        match self {
            Algorithm::Flanp => "flanp".into(),
            Algorithm::Full { solver } => format!("{}_full", solver_name(*solver)),
            Algorithm::Partial { k, pick: PartialPick::Random } => format!("partial_random_{k}"),
            Algorithm::Partial { k, pick: PartialPick::Fastest } => format!("partial_fastest_{k}"),
            Algorithm::Heuristic { .. } => "heuristic".into(),
        }
    }
}

fn solver_name(kind: SolverKind) -> &'static str {
    match kind {
        SolverKind::Fedgate => "fedgate",
        SolverKind::Fedavg => "fedavg",
        SolverKind::Fednova => "fednova",
    }
}

pub fn run(problem: &Problem, config: &RunConfig, algorithm: Algorithm) -> Result<Trace> {
    match algorithm {
        Algorithm::Flanp => run_flanp(problem, config),
        Algorithm::Full { solver } => run_full_participation(problem, config, solver),
        Algorithm::Partial { k, pick } => run_partial(problem, config, k, pick),
        Algorithm::Heuristic { theta0 } => run_heuristic(problem, config, theta0),
    }
}

/// The doubling schedule with the statistical-accuracy stopping test (or a
/// fixed `R` rounds per stage).
pub fn run_flanp(problem: &Problem, config: &RunConfig) -> Result<Trace> {
    config.validate(problem.nodes())?;
    let curvature = run_curvature(problem, config, None)?;
    let s = problem.samples_per_node();
    let mut plans = Vec::new();
    for &n in schedule(config.n0, problem.nodes())?.sizes() {
        let base = stage_params(config, solvers::theorem1_params(n, s, &curvature, &config.budget, config.sampling)?);
        let stop = match config.mode {
            StopMode::Criterion => Stop::Threshold(accuracy_threshold(n, s, &config.budget, curvature.mu)?),
            StopMode::FixedR => Stop::Rounds(base.rounds),
        };
        plans.push(StagePlan {
            n,
            pick: Pick::Prefix(n),
            base,
            stop,
            oracle_n: n,
        });
    }
    let name = match config.solver {
        SolverKind::Fedgate => "flanp".to_string(),
        other => format!("flanp_{}", solver_name(other)),
    };
    Runner::new(problem, config, name, curvature).drive(plans)
}

/// All `N` clients from the first round, with the full-participation
/// parameters. Criterion mode stops on the same `N`-client test as
/// [`run_flanp`] with the same curvature, so both end at the same accuracy.
pub fn run_full_participation(problem: &Problem, config: &RunConfig, solver: SolverKind) -> Result<Trace> {
    config.validate(problem.nodes())?;
    let curvature = run_curvature(problem, config, None)?;
    let n = problem.nodes();
    let s = problem.samples_per_node();
    let init = benchmark_init(problem, &vec![0.0; problem.spec().dim])?;
    let base = stage_params(
        config,
        solvers::benchmark_params(n, s, &curvature, &config.budget, &init, config.sampling)?,
    );
    let stop = match config.mode {
        StopMode::Criterion => Stop::Threshold(accuracy_threshold(n, s, &config.budget, curvature.mu)?),
        StopMode::FixedR => Stop::Rounds(base.rounds),
    };
    let plan = StagePlan {
        n,
        pick: Pick::Prefix(n),
        base,
        stop,
        oracle_n: n,
    };
    let mut cfg = config.clone();
    cfg.solver = solver;
    let name = Algorithm::Full { solver }.name();
    Runner::new(problem, &cfg, name, curvature).drive(vec![plan])
}

/// A single stage of `k` participants per round: the `k` fastest clients
/// every round, or a fresh uniformly random `k`-subset each round.
///
/// The stopping test uses `n = k` and the gradient over the round's
/// participants. Suboptimality is measured on `L_k` for the fastest pick and
/// on `L_N` for the random pick.
pub fn run_partial(problem: &Problem, config: &RunConfig, k: usize, pick: PartialPick) -> Result<Trace> {
    config.validate(problem.nodes())?;
    if k == 0 || k > problem.nodes() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", problem.nodes())));
    }
    let curvature = run_curvature(problem, config, Some(k))?;
    let s = problem.samples_per_node();
    let base = stage_params(config, solvers::theorem1_params(k, s, &curvature, &config.budget, config.sampling)?);
    let stop = match config.mode {
        StopMode::Criterion => Stop::Threshold(accuracy_threshold(k, s, &config.budget, curvature.mu)?),
        StopMode::FixedR => Stop::Rounds(base.rounds),
    };
    let (pick_rule, oracle_n) = match pick {
        PartialPick::Random => (Pick::Random(k), problem.nodes()),
        PartialPick::Fastest => (Pick::Prefix(k), k),
    };
    let plan = StagePlan {
        n: k,
        pick: pick_rule,
        base,
        stop,
        oracle_n,
    };
    let name = Algorithm::Partial { k, pick }.name();
    Runner::new(problem, config, name, curvature).drive(vec![plan])
}

/// The doubling schedule with threshold `θ_j = θ₀/2^j` at stage `j` instead of
/// the statistical-accuracy test. The stop mode is ignored.
pub fn run_heuristic(problem: &Problem, config: &RunConfig, theta0: f64) -> Result<Trace> {
    config.validate(problem.nodes())?;
    if !(theta0.is_finite() && theta0 > 0.0) {
        return Err(Error::invalid(format!("theta0 must be positive, got {theta0}")));
    }
    let curvature = run_curvature(problem, config, None)?;
    let s = problem.samples_per_node();
    let mut plans = Vec::new();
    for (j, &n) in schedule(config.n0, problem.nodes())?.sizes().iter().enumerate() {
        let base = stage_params(config, solvers::theorem1_params(n, s, &curvature, &config.budget, config.sampling)?);
        plans.push(StagePlan {
            n,
            pick: Pick::Prefix(n),
            base,
            stop: Stop::Threshold(heuristic_threshold(theta0, j)),
            oracle_n: n,
        });
    }
    Runner::new(problem, config, "heuristic".into(), curvature).drive(plans)
}

/// `θ₀/2^j`
pub fn heuristic_threshold(theta0: f64, doublings: usize) -> f64 {
    theta0 / 2f64.powi(doublings as i32)
}

/// The configured curvature, or the envelope over every cohort the run trains
/// on, so a single `(μ, L)` is valid for all of them.
fn run_curvature(problem: &Problem, config: &RunConfig, extra: Option<usize>) -> Result<CurvatureConstants> {
    if let Some(c) = config.curvature {
        return CurvatureConstants::new(c.mu, c.lip);
    }
    let mut sizes: Vec<usize> = schedule(config.n0, problem.nodes())?.sizes().to_vec();
    sizes.extend(extra);
    let parts = sizes
        .into_iter()
        .map(|n| problem.prefix_curvature(n))
        .collect::<Result<Vec<_>>>()?;
    Ok(CurvatureConstants::envelope(parts).expect("schedule is never empty"))
}

fn stage_params(config: &RunConfig, mut params: SolverParams) -> SolverParams {
    if let Some(o) = config.step_override {
        params.eta = o.eta;
        params.gamma = o.gamma;
    }
    params
}

#[derive(Debug, Clone, Copy)]
enum Pick {
    Prefix(usize),
    Random(usize),
}

#[derive(Debug, Clone, Copy)]
enum Stop {
    Threshold(f64),
    Rounds(usize),
}

struct StagePlan {
    n: usize,
    pick: Pick,
    /// FedGATE parameters; FedAvg and FedNova take `η·γ` as their step.
    base: SolverParams,
    stop: Stop,
    oracle_n: usize,
}

struct Runner<'a> {
    problem: &'a Problem,
    config: &'a RunConfig,
    algorithm: String,
    curvature: CurvatureConstants,
    w: Model,
    /// Tracking vectors for every client in fleet order.
    deltas: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    ledger: ClockLedger,
    records: Vec<RoundRecord>,
    stages: Vec<StageSummary>,
}

impl<'a> Runner<'a> {
    fn new(problem: &'a Problem, config: &'a RunConfig, algorithm: String, curvature: CurvatureConstants) -> Self {
        let dim = problem.spec().dim;
        Self {
            problem,
            config,
            algorithm,
            curvature,
            w: Model::zeros(dim),
            deltas: vec![vec![0.0; dim]; problem.nodes()],
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            ledger: ClockLedger::new(),
            records: Vec::new(),
            stages: Vec::new(),
        }
    }

    fn drive(mut self, plans: Vec<StagePlan>) -> Result<Trace> {
        for plan in &plans {
            if let Err(e) = self.run_stage(plan) {
                return Err(match e {
                    e @ Error::StageBudgetExceeded { .. } => e,
                    other => Error::RunAborted {
                        source: Box::new(other),
                        partial: Box::new(self.snapshot()),
                    },
                });
            }
        }
        Ok(self.snapshot())
    }

    fn snapshot(&self) -> Trace {
        Trace {
            algorithm: self.algorithm.clone(),
            records: self.records.clone(),
            stages: self.stages.clone(),
            final_model: self.w.clone(),
            total_time: self.ledger.total(),
            curvature: self.curvature,
        }
    }

    fn participants(&mut self, pick: Pick) -> Vec<usize> {
        match pick {
            Pick::Prefix(n) => (0..n).collect(),
            Pick::Random(k) => {
                let mut idx = index::sample(&mut self.rng, self.problem.nodes(), k).into_vec();
                idx.sort_unstable();
                idx
            }
        }
    }

    fn shards(&self, idx: &[usize]) -> Vec<&'a Shard> {
        let all = self.problem.shards();
        idx.iter().map(|&i| &all[i]).collect()
    }

    fn record(&mut self, stage_n: usize, round: usize, idx: &[usize], oracle_n: usize) -> Result<f64> {
        let spec = self.problem.spec();
        let grad = losses::empirical_gradient(spec, &self.w, &self.shards(idx))?;
        let grad_norm_sq = vector::norm_sq(&grad);
        let (_, opt) = self.problem.prefix_optimum(oracle_n)?;
        let subopt = losses::empirical_risk(spec, &self.w, &self.problem.prefix(oracle_n))? - opt;
        self.records.push(RoundRecord {
            stage_n,
            round,
            sim_time: self.ledger.total(),
            grad_norm_sq,
            subopt,
            participants: idx.len(),
        });
        Ok(grad_norm_sq)
    }

    fn run_stage(&mut self, plan: &StagePlan) -> Result<()> {
        for d in &mut self.deltas {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        self.ledger.begin_stage(plan.n, self.config.comm_cost);
        let threshold = match plan.stop {
            Stop::Threshold(t) => Some(t),
            Stop::Rounds(_) => None,
        };
        self.stages.push(StageSummary {
            n: plan.n,
            rounds: 0,
            first_record: self.records.len(),
            threshold,
            params: plan.base,
            feasible: plan.base.feasible(self.curvature.lip),
            time: 0.0,
        });

        let mut idx = self.participants(plan.pick);
        let mut grad_norm_sq = self.record(plan.n, 0, &idx, plan.oracle_n)?;
        let mut rounds = 0;
        loop {
            match plan.stop {
                Stop::Threshold(t) => {
                    if grad_norm_sq <= t {
                        break;
                    }
                    if rounds >= self.config.max_rounds_per_stage {
                        return Err(Error::StageBudgetExceeded {
                            stage_n: plan.n,
                            max_rounds: self.config.max_rounds_per_stage,
                            partial: Box::new(self.snapshot()),
                        });
                    }
                }
                Stop::Rounds(r) => {
                    if rounds >= r {
                        break;
                    }
                }
            }
            if rounds > 0 && matches!(plan.pick, Pick::Random(_)) {
                idx = self.participants(plan.pick);
            }
            self.round(&idx, &plan.base, rounds)?;
            rounds += 1;
            let stage = self.stages.last_mut().expect("stage summary pushed above");
            stage.rounds = rounds;
            stage.time = self.ledger.stages().last().map_or(0.0, |s| s.time());
            grad_norm_sq = self.record(plan.n, rounds, &idx, plan.oracle_n)?;
        }
        Ok(())
    }

    fn round(&mut self, idx: &[usize], base: &SolverParams, completed: usize) -> Result<()> {
        let spec = self.problem.spec();
        let shards = self.shards(idx);
        let fleet = self.problem.fleet();
        let times: Vec<f64> = idx.iter().map(|&i| fleet.time(i)).collect();
        let slowest = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let upload = u64::from(self.config.charge_gradient_upload);
        let plain = SolverParams {
            eta: base.eta * base.gamma,
            gamma: 1.0,
            ..*base
        };
        match self.config.solver {
            SolverKind::Fedgate => {
                let state = SolverState {
                    w: self.w.clone(),
                    delta: idx.iter().map(|&i| self.deltas[i].clone()).collect(),
                    round: completed,
                };
                let next = solvers::fedgate_round(&state, &shards, base, spec, &mut self.rng)?;
                for (&i, d) in idx.iter().zip(next.delta) {
                    self.deltas[i] = d;
                }
                self.w = next.w;
                self.ledger.charge_uniform(base.tau as u64 + upload, slowest);
            }
            SolverKind::Fedavg => {
                let state = SolverState {
                    w: self.w.clone(),
                    delta: Vec::new(),
                    round: completed,
                };
                self.w = solvers::fedavg_round(&state, &shards, &plain, spec, &mut self.rng)?.w;
                self.ledger.charge_uniform(base.tau as u64 + upload, slowest);
            }
            SolverKind::Fednova => {
                let state = SolverState {
                    w: self.w.clone(),
                    delta: Vec::new(),
                    round: completed,
                };
                let taus = solvers::fednova_local_taus(&times, base.tau);
                self.w = solvers::fednova_round(&state, &shards, &taus, &plain, spec, &mut self.rng)?.w;
                let compute = times
                    .iter()
                    .zip(&taus)
                    .map(|(t, &k)| k as f64 * t)
                    .fold(f64::NEG_INFINITY, f64::max);
                self.ledger.charge_irregular(compute + upload as f64 * slowest);
            }
        }
        Ok(())
    }
}
