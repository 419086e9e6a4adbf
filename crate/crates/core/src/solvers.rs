//! One-round engines for FedGATE, FedAvg and FedNova, and the stage and
//! benchmark parameter formulas.
//!
//! Every round draws one seed per participant from the caller's RNG, runs the
//! local updates in parallel, and aggregates in participant order, so results
//! do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, CurvatureConstants, LossSpec, Model, Sampling, Shard};
use crate::vector::{self, RunningMean};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub w: Model,
    /// Gradient-tracking vectors, one per participant, in participant order.
    pub delta: Vec<Vec<f64>>,
    pub round: usize,
}

impl SolverState {
    /// State at `w` with zeroed tracking for `participants` nodes.
    pub fn new(w: Model, participants: usize) -> Self {
        let dim = w.len();
        Self {
            w,
            delta: vec![vec![0.0; dim]; participants],
            round: 0,
        }
    }

    /// Zeroes tracking for a new participant count and restarts the round
    /// counter, keeping the model.
    pub fn reset(&mut self, participants: usize) {
        self.delta = vec![vec![0.0; self.w.len()]; participants];
        self.round = 0;
    }

    /// `‖Σ_i δ_i‖`
    pub fn delta_sum_norm(&self) -> f64 {
        let mut sum = vec![0.0; self.w.len()];
        for d in &self.delta {
            vector::axpy(1.0, d, &mut sum);
        }
        vector::norm_sq(&sum).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub tau: usize,
    pub rounds: usize,
    pub sampling: Sampling,
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.tau == 0 || self.rounds == 0 {
            return Err(Error::invalid("tau and rounds must be at least 1"));
        }
        Ok(())
    }

    /// `2·η·γ·τ·L`, equal to 1 for the formula stepsizes.
    pub fn coupling(&self, lip: f64) -> f64 {
        2.0 * self.eta * self.gamma * self.tau as f64 * lip
    }

    /// Whether `2ηγτL = 1` (to 1e-12) and `30η²L²τ² ≤ 1` both hold.
    pub fn feasible(&self, lip: f64) -> bool {
        (self.coupling(lip) - 1.0).abs() <= 1e-12 && local_drift(self.eta, lip, self.tau) <= 1.0
    }
}

/// `30·η²·L²·τ²`
fn local_drift(eta: f64, lip: f64, tau: usize) -> f64 {
    let t = eta * lip * tau as f64;
    30.0 * t * t
}

/// Constants of the statistical accuracy `V_ns = c/(ns)` and the gradient
/// noise bound `σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBudget {
    pub c: f64,
    pub sigma2: f64,
}

impl AccuracyBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::invalid(format!("c must be positive, got {}", self.c)));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(Error::invalid(format!(
                "sigma2 must be nonnegative, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }

    /// `V_x = c/x`, with `V_0 = 0`.
    pub fn v(&self, samples: usize) -> f64 {
        if samples == 0 {
            0.0
        } else {
            self.c / samples as f64
        }
    }
}

/// Initial-point quantities for the full-participation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInit {
    /// `L_N(w₀) − L_N(w*_N)`
    pub delta0: f64,
    /// `(1/N)·Σ_i ‖∇L^i(w₀)‖²`
    pub delta0_prime: f64,
}

fn check_round_inputs(state: &SolverState, participants: &[&Shard], params: &SolverParams, spec: &LossSpec) -> Result<()> {
    params.validate()?;
    if participants.is_empty() {
        return Err(Error::Empty("participant list"));
    }
    if state.w.len() != spec.dim {
        return Err(Error::DimensionMismatch {
            expected: spec.dim,
            got: state.w.len(),
        });
    }
    for shard in participants {
        if shard.dim() != spec.dim {
            return Err(Error::DimensionMismatch {
                expected: spec.dim,
                got: shard.dim(),
            });
        }
        if let Sampling::WithReplacement { batch_size } = params.sampling {
            if batch_size == 0 || batch_size > shard.len() {
                return Err(Error::invalid(format!(
                    "batch size {batch_size} outside 1..={} for node {}",
                    shard.len(),
                    shard.node_id()
                )));
            }
        }
    }
    if !vector::all_finite(&state.w) {
        return Err(Error::NonFinite("global model"));
    }
    Ok(())
}

fn node_seeds<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

/// What every participant of a round shares.
struct LocalCtx<'a> {
    spec: &'a LossSpec,
    w0: &'a [f64],
    eta: f64,
    sampling: Sampling,
    round: usize,
}

impl LocalCtx<'_> {
    /// Runs `steps` updates `w ← w − η·(g̃(w) − correction)` from `w0` and
    /// returns the final iterate together with the summed directions.
    fn run(&self, shard: &Shard, correction: Option<&[f64]>, steps: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = self.w0.to_vec();
        let mut total = vec![0.0; w.len()];
        for _ in 0..steps {
            let mut d = losses::stochastic_gradient_unchecked(self.spec, &w, shard, self.sampling, &mut rng);
            if let Some(delta) = correction {
                for (di, ci) in d.iter_mut().zip(delta) {
                    *di -= ci;
                }
            }
            vector::axpy(-self.eta, &d, &mut w);
            vector::axpy(1.0, &d, &mut total);
            if !vector::all_finite(&w) {
                return Err(Error::Diverged {
                    round: self.round,
                    node: shard.node_id(),
                });
            }
        }
        Ok((w, total))
    }
}

/// One FedGATE round over `participants`.
///
/// Each node runs `τ` corrected local steps and reports `Δ_i`, the sum of its
/// step directions, which equals `(w − w_i^τ)/η`. The server steps
/// `w ← w − η·γ·mean(Δ_i)` and every node moves `δ_i` by `(Δ_i − Δ)/τ`.
pub fn fedgate_round<R: Rng + ?Sized>(
    state: &SolverState,
    participants: &[&Shard],
    params: &SolverParams,
    spec: &LossSpec,
    rng: &mut R,
) -> Result<SolverState> {
    check_round_inputs(state, participants, params, spec)?;
    if state.delta.len() != participants.len() {
        return Err(Error::invalid(format!(
            "state tracks {} nodes but {} participate",
            state.delta.len(),
            participants.len()
        )));
    }
    let seeds = node_seeds(rng, participants.len());
    let round = state.round + 1;
    let ctx = LocalCtx {
        spec,
        w0: &state.w,
        eta: params.eta,
        sampling: params.sampling,
        round,
    };
    let uploads: Vec<Vec<f64>> = participants
        .par_iter()
        .zip(&state.delta)
        .zip(&seeds)
        .map(|((shard, delta), &seed)| ctx.run(shard, Some(delta), params.tau, seed).map(|(_, total)| total))
        .collect::<Result<_>>()?;

    let mut mean = RunningMean::new(spec.dim);
    for u in &uploads {
        mean.push(u);
    }
    let big_delta = mean.finish();

    let mut w = state.w.0.clone();
    vector::axpy(-params.eta * params.gamma, &big_delta, &mut w);
    if !vector::all_finite(&w) {
        return Err(Error::Diverged { round, node: usize::MAX });
    }
    let inv_tau = 1.0 / params.tau as f64;
    let delta = state
        .delta
        .iter()
        .zip(&uploads)
        .map(|(d, u)| {
            d.iter()
                .zip(u.iter().zip(&big_delta))
                .map(|(di, (ui, bi))| di + (ui - bi) * inv_tau)
                .collect()
        })
        .collect();
    Ok(SolverState {
        w: Model(w),
        delta,
        round,
    })
}

/// Local displacements `w − w_i^{τ_i}` for each participant.
fn displacements<R: Rng + ?Sized>(
    state: &SolverState,
    participants: &[&Shard],
    taus: &[usize],
    params: &SolverParams,
    spec: &LossSpec,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let seeds = node_seeds(rng, participants.len());
    let ctx = LocalCtx {
        spec,
        w0: &state.w,
        eta: params.eta,
        sampling: params.sampling,
        round: state.round + 1,
    };
    participants
        .par_iter()
        .zip(taus)
        .zip(&seeds)
        .map(|((shard, &tau), &seed)| ctx.run(shard, None, tau, seed).map(|(w_local, _)| vector::sub(&state.w, &w_local)))
        .collect()
}

fn apply_mean_step(state: &SolverState, steps: &[Vec<f64>]) -> Result<SolverState> {
    let mut mean = RunningMean::new(state.w.len());
    for s in steps {
        mean.push(s);
    }
    let w = vector::sub(&state.w, &mean.finish());
    let round = state.round + 1;
    if !vector::all_finite(&w) {
        return Err(Error::Diverged { round, node: usize::MAX });
    }
    Ok(SolverState {
        w: Model(w),
        delta: state.delta.clone(),
        round,
    })
}

/// One FedAvg round: `τ` plain SGD steps of size `η` at every node, then the
/// server averages the local models. `γ` is not used.
pub fn fedavg_round<R: Rng + ?Sized>(
    state: &SolverState,
    participants: &[&Shard],
    params: &SolverParams,
    spec: &LossSpec,
    rng: &mut R,
) -> Result<SolverState> {
    check_round_inputs(state, participants, params, spec)?;
    let taus = vec![params.tau; participants.len()];
    let disp = displacements(state, participants, &taus, params, spec, rng)?;
    apply_mean_step(state, &disp)
}

/// One FedNova round: node `i` runs `τ_i` SGD steps and the server applies
/// `w ← w − η·τ_eff·mean(Δ_i/(η·τ_i))` with `τ_eff = mean(τ_i)`.
///
/// The update is formed as `mean((τ_eff/τ_i)·Δ_i)`; when all `τ_i` agree the
/// weight is exactly 1 and the result matches [`fedavg_round`] bit for bit.
pub fn fednova_round<R: Rng + ?Sized>(
    state: &SolverState,
    participants: &[&Shard],
    local_taus: &[usize],
    params: &SolverParams,
    spec: &LossSpec,
    rng: &mut R,
) -> Result<SolverState> {
    check_round_inputs(state, participants, params, spec)?;
    if local_taus.len() != participants.len() {
        return Err(Error::DimensionMismatch {
            expected: participants.len(),
            got: local_taus.len(),
        });
    }
    if local_taus.contains(&0) {
        return Err(Error::invalid("every local step count must be at least 1"));
    }
    let disp = displacements(state, participants, local_taus, params, spec, rng)?;
    let tau_eff = local_taus.iter().sum::<usize>() as f64 / local_taus.len() as f64;
    let scaled: Vec<Vec<f64>> = disp
        .into_iter()
        .zip(local_taus)
        .map(|(d, &t)| {
            let weight = tau_eff / t as f64;
            d.into_iter().map(|v| weight * v).collect()
        })
        .collect();
    apply_mean_step(state, &scaled)
}

/// Local steps for FedNova when each round lasts as long as `tau` updates of
/// the fastest participant: `τ_i = max(1, ⌊τ·T_fastest/T_i⌋)`.
pub fn fednova_local_taus(participant_times: &[f64], tau: usize) -> Vec<usize> {
    let fastest = participant_times.iter().cloned().fold(f64::INFINITY, f64::min);
    participant_times
        .iter()
        .map(|&t| ((tau as f64 * fastest / t).floor() as usize).max(1))
        .collect()
}

fn check_constants(curvature: &CurvatureConstants, budget: &AccuracyBudget) -> Result<()> {
    budget.validate()?;
    if !(curvature.mu > 0.0) {
        return Err(Error::NotStronglyConvex { mu: curvature.mu });
    }
    Ok(())
}

/// The five upper bounds on `α_n` for a stage with `n` participants.
pub fn theorem1_alpha_terms(n: usize, curvature: &CurvatureConstants, c: f64) -> [f64; 5] {
    let CurvatureConstants { mu, lip, kappa } = *curvature;
    let sn = (n as f64).sqrt();
    [
        1.0 / (12.0 * 3f64.sqrt() * kappa * (kappa * lip).sqrt()),
        sn / (12.0 * (2.0 * (3.0 * kappa * kappa + 2.0) * (2.0 * mu + 1.0) * kappa * lip).sqrt()),
        (sn / (96.0 * kappa * kappa * lip * lip)).cbrt(),
        sn / (15.0 * c * kappa * lip).sqrt(),
        sn / (lip * 30f64.sqrt()),
    ]
}

/// The four upper bounds on `α` for full participation with `N·s` samples.
pub fn benchmark_alpha_terms(total_samples: usize, curvature: &CurvatureConstants, c: f64, delta0_prime: f64) -> [f64; 4] {
    let CurvatureConstants { lip, kappa, .. } = *curvature;
    let sm = (total_samples as f64).sqrt();
    let first = if delta0_prime > 0.0 {
        c.sqrt() / (2.0 * 30f64.sqrt() * (kappa * (kappa * kappa + 1.0) * lip * delta0_prime).sqrt())
    } else {
        f64::INFINITY
    };
    [
        first,
        (sm / (96.0 * kappa * kappa * lip * lip)).cbrt(),
        sm / (15.0 * kappa * lip).sqrt(),
        sm / (lip * 30f64.sqrt()),
    ]
}

/// `η = α/(τ·√m)`, `γ = √m/(2·α·L)`, with `α` lowered by a few ulps if
/// rounding would break `30η²L²τ² ≤ 1` when that bound is the binding one.
fn stepsizes(alpha: f64, tau: usize, scale: f64, lip: f64) -> (f64, f64, f64) {
    let mut alpha = alpha;
    let mut eta = alpha / (tau as f64 * scale);
    while local_drift(eta, lip, tau) > 1.0 {
        alpha *= 1.0 - 4.0 * f64::EPSILON;
        eta = alpha / (tau as f64 * scale);
    }
    (alpha, eta, scale / (2.0 * alpha * lip))
}

/// Stage parameters for `n` participants holding `s` samples each.
///
/// `τ = ⌈1.5·s·σ²/c⌉` (at least 1), `R = ⌈12·κ·ln 6⌉`, and `α` is the
/// smallest of [`theorem1_alpha_terms`].
pub fn theorem1_params(
    n: usize,
    s: usize,
    curvature: &CurvatureConstants,
    budget: &AccuracyBudget,
    sampling: Sampling,
) -> Result<SolverParams> {
    check_constants(curvature, budget)?;
    if n == 0 || s == 0 {
        return Err(Error::invalid("n and s must be at least 1"));
    }
    let tau = ((1.5 * s as f64 * budget.sigma2 / budget.c).ceil() as usize).max(1);
    let rounds = ((12.0 * curvature.kappa * 6f64.ln()).ceil() as usize).max(1);
    let alpha = theorem1_alpha_terms(n, curvature, budget.c)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let (alpha, eta, gamma) = stepsizes(alpha, tau, (n as f64).sqrt(), curvature.lip);
    Ok(SolverParams {
        eta,
        gamma,
        alpha,
        tau,
        rounds,
        sampling,
    })
}

/// Full-participation parameters for `n` nodes holding `s` samples each.
///
/// `τ = ⌈1.25·σ²·s/c⌉` and `R = ⌈6·κ·ln(5·Δ₀·N·s/c)⌉`, both at least 1.
pub fn benchmark_params(
    n: usize,
    s: usize,
    curvature: &CurvatureConstants,
    budget: &AccuracyBudget,
    init: &BenchmarkInit,
    sampling: Sampling,
) -> Result<SolverParams> {
    check_constants(curvature, budget)?;
    if n == 0 || s == 0 {
        return Err(Error::invalid("n and s must be at least 1"));
    }
    if !(init.delta0 > 0.0 && init.delta0_prime >= 0.0) {
        return Err(Error::invalid(format!(
            "need delta0 > 0 and delta0_prime >= 0, got {} and {}",
            init.delta0, init.delta0_prime
        )));
    }
    let total = n * s;
    let arg = 5.0 * init.delta0 * total as f64 / budget.c;
    if !(arg > 1.0) {
        return Err(Error::invalid(format!(
            "c too large for Δ₀Ns: 5·Δ₀·N·s/c = {arg} must exceed 1"
        )));
    }
    let tau = ((1.25 * budget.sigma2 * s as f64 / budget.c).ceil() as usize).max(1);
    let rounds = ((6.0 * curvature.kappa * arg.ln()).ceil() as usize).max(1);
    let alpha = benchmark_alpha_terms(total, curvature, budget.c, init.delta0_prime)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let (alpha, eta, gamma) = stepsizes(alpha, tau, (total as f64).sqrt(), curvature.lip);
    Ok(SolverParams {
        eta,
        gamma,
        alpha,
        tau,
        rounds,
        sampling,
    })
}

/// Mean of `‖g̃ − ∇L^i(w)‖²` over shards and trials: an empirical stand-in
/// for the noise bound `σ²`. The squared error is summed over coordinates.
pub fn estimate_sigma2<R: Rng + ?Sized>(
    spec: &LossSpec,
    shards: &[&Shard],
    w: &[f64],
    sampling: Sampling,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials < 2 {
        return Err(Error::invalid("sigma² estimation needs at least 2 trials"));
    }
    if shards.is_empty() {
        return Err(Error::Empty("shard list"));
    }
    if sampling == Sampling::FullPass {
        return Ok(0.0);
    }
    let mut per_shard = Vec::with_capacity(shards.len());
    for shard in shards {
        let exact = losses::local_gradient(spec, w, shard)?;
        let mut acc = 0.0;
        for _ in 0..trials {
            let g = losses::stochastic_gradient(spec, w, shard, sampling, rng)?;
            acc += vector::norm_sq(&vector::sub(&g, &exact));
        }
        per_shard.push(acc / trials as f64);
    }
    Ok(vector::running_mean_scalar(per_shard))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Sample;
    use approx::assert_relative_eq;

    fn quad_shard(id: usize, target: f64) -> Shard {
        // ½(target − w)² in one dimension.
        Shard::new(id, vec![Sample::new(vec![1.0], target)]).unwrap()
    }

    fn params(eta: f64, gamma: f64, tau: usize) -> SolverParams {
        SolverParams {
            eta,
            gamma,
            alpha: 1.0,
            tau,
            rounds: 1,
            sampling: Sampling::FullPass,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn fedgate_unit_step_reaches_optimum() {
        let spec = LossSpec::ridge(0.0, 1).unwrap();
        let a = quad_shard(0, 1.0);
        let b = quad_shard(1, 1.0);
        let state = SolverState::new(Model::zeros(1), 2);
        let next = fedgate_round(&state, &[&a, &b], &params(0.5, 2.0, 1), &spec, &mut rng()).unwrap();
        assert_eq!(next.w.0, vec![1.0]);
        assert_eq!(next.round, 1);
    }

    #[test]
    fn fedgate_hand_trace() {
        let spec = LossSpec::ridge(0.0, 1).unwrap();
        let shard = quad_shard(0, 0.0);
        let state = SolverState::new(Model(vec![1.0]), 1);
        let next = fedgate_round(&state, &[&shard], &params(0.5, 1.0, 2), &spec, &mut rng()).unwrap();
        // Locals 1 → 0.5 → 0.25, Δ = 1 + 0.5 = 1.5, w = 1 − 0.5·1.5.
        assert_eq!(next.w.0, vec![0.25]);
        assert_eq!(next.delta, vec![vec![0.0]]);
    }

    #[test]
    fn fedgate_conserves_tracking_sum() {
        let spec = LossSpec::ridge(0.1, 1).unwrap();
        let shards: Vec<Shard> = [-3.0, 0.5, 2.0, 7.0].iter().enumerate().map(|(i, &t)| quad_shard(i, t)).collect();
        let refs: Vec<&Shard> = shards.iter().collect();
        let mut state = SolverState::new(Model::zeros(1), 4);
        let mut r = rng();
        for _ in 0..20 {
            state = fedgate_round(&state, &refs, &params(0.1, 2.0, 3), &spec, &mut r).unwrap();
            assert!(state.delta_sum_norm() <= 1e-12);
        }
        assert!(state.delta.iter().any(|d| d[0].abs() > 1e-3));
    }

    #[test]
    fn fedgate_single_step_is_gradient_descent() {
        let spec = LossSpec::ridge(0.0, 2).unwrap();
        let mk = |id, x: [f64; 2], y| Shard::new(id, vec![Sample::new(x.to_vec(), y)]).unwrap();
        let shards = [mk(0, [1.0, 2.0], 0.5), mk(1, [-1.0, 0.3], 2.0)];
        let refs: Vec<&Shard> = shards.iter().collect();
        let w = vec![0.2, -0.4];
        let state = SolverState::new(Model(w.clone()), 2);
        let p = params(0.3, 0.7, 1);
        let next = fedgate_round(&state, &refs, &p, &spec, &mut rng()).unwrap();
        let g = losses::empirical_gradient(&spec, &w, &refs).unwrap();
        for k in 0..2 {
            assert_eq!(next.w[k], w[k] - p.eta * p.gamma * g[k]);
        }
    }

    #[test]
    fn fedgate_rejects_mismatched_tracking() {
        let spec = LossSpec::ridge(0.0, 1).unwrap();
        let shard = quad_shard(0, 0.0);
        let state = SolverState::new(Model::zeros(1), 2);
        assert!(fedgate_round(&state, &[&shard], &params(0.5, 1.0, 1), &spec, &mut rng()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let spec = LossSpec::ridge(0.0, 1).unwrap();
        let shard = Shard::new(0, vec![Sample::new(vec![1e150], 0.0)]).unwrap();
        let state = SolverState::new(Model(vec![1.0]), 1);
        let err = fedgate_round(&state, &[&shard], &params(1.0, 1.0, 5), &spec, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::Diverged { node: 0, .. }));
    }

    #[test]
    fn fedavg_examples() {
        let spec = LossSpec::ridge(0.0, 1).unwrap();
        let a = quad_shard(0, 0.2);
        let b = quad_shard(1, 0.4);
        let state = SolverState::new(Model::zeros(1), 0);
        let next = fedavg_round(&state, &[&a, &b], &params(1.0, 1.0, 1), &spec, &mut rng()).unwrap();
        assert_relative_eq!(next.w[0], 0.3, epsilon = 1e-15);

        // Identical nodes behave like single-machine GD.
        let c = quad_shard(0, 2.0);
        let d = quad_shard(1, 2.0);
        let next = fedavg_round(&state, &[&c, &d], &params(0.25, 1.0, 3), &spec, &mut rng()).unwrap();
        let mut w = 0.0;
        for _ in 0..3 {
            w -= 0.25 * (w - 2.0);
        }
        assert_relative_eq!(next.w[0], w, epsilon = 1e-15);
    }

    #[test]
    fn fednova_equal_taus_match_fedavg() {
        let spec = LossSpec::ridge(0.05, 1).unwrap();
        let shards: Vec<Shard> = (0..3)
            .map(|i| {
                Shard::new(i, (0..5).map(|k| Sample::new(vec![1.0 + k as f64 * 0.1], i as f64 - k as f64)).collect())
                    .unwrap()
            })
            .collect();
        let refs: Vec<&Shard> = shards.iter().collect();
        let mut p = params(0.1, 1.0, 4);
        p.sampling = Sampling::WithReplacement { batch_size: 2 };
        let state = SolverState::new(Model(vec![0.3]), 0);
        let avg = fedavg_round(&state, &refs, &p, &spec, &mut rng()).unwrap();
        let nova = fednova_round(&state, &refs, &[4, 4, 4], &p, &spec, &mut rng()).unwrap();
        assert_eq!(avg, nova);
    }

    #[test]
    fn fednova_normalizes_displacement() {
        // A tiny feature with a huge target keeps the gradient essentially
        // constant near 0, so every step moves by η·g.
        let spec = LossSpec::ridge(0.0, 1).unwrap();
        let shard = |id| Shard::new(id, vec![Sample::new(vec![1e-8], 1e8)]).unwrap();
        let (a, b) = (shard(0), shard(1));
        let state = SolverState::new(Model::zeros(1), 0);
        let eta = 1e-3;
        let next = fednova_round(&state, &[&a, &b], &[1, 2], &params(eta, 1.0, 1), &spec, &mut rng()).unwrap();
        let g = losses::local_gradient(&spec, &[0.0], &a).unwrap()[0];
        assert_relative_eq!(next.w[0], -eta * 1.5 * g, max_relative = 1e-9);

        let one = fednova_round(&state, &[&a], &[3], &params(eta, 1.0, 1), &spec, &mut rng()).unwrap();
        let mut w = 0.0;
        for _ in 0..3 {
            w -= eta * losses::local_gradient(&spec, &[w], &a).unwrap()[0];
        }
        assert_relative_eq!(one.w[0], w, max_relative = 1e-12);
        assert!(fednova_round(&state, &[&a], &[0], &params(eta, 1.0, 1), &spec, &mut rng()).is_err());
    }

    #[test]
    fn fednova_taus_follow_speed() {
        assert_eq!(fednova_local_taus(&[1.0, 2.0, 3.0, 100.0], 6), vec![6, 3, 2, 1]);
    }

    #[test]
    fn theorem1_counts() {
        let unit = CurvatureConstants::new(1.0, 1.0).unwrap();
        let p = theorem1_params(1, 1, &unit, &AccuracyBudget { c: 1.0, sigma2: 0.0 }, Sampling::FullPass).unwrap();
        assert_eq!(p.rounds, 22);
        let p = theorem1_params(4, 100, &unit, &AccuracyBudget { c: 150.0, sigma2: 1.0 }, Sampling::FullPass).unwrap();
        assert_eq!(p.tau, 1);
        let p = theorem1_params(4, 100, &unit, &AccuracyBudget { c: 10.0, sigma2: 1.0 }, Sampling::FullPass).unwrap();
        assert_eq!(p.tau, 15);
        assert!(theorem1_params(1, 1, &unit, &AccuracyBudget { c: 0.0, sigma2: 1.0 }, Sampling::FullPass).is_err());
    }

    #[test]
    fn theorem1_alpha_terms_unit_constants() {
        let unit = CurvatureConstants::new(1.0, 1.0).unwrap();
        let terms = theorem1_alpha_terms(1, &unit, 1.0);
        let oracle = [
            1.0 / (12.0 * 3f64.sqrt()),
            1.0 / (12.0 * 30f64.sqrt()),
            (1.0f64 / 96.0).powf(1.0 / 3.0),
            1.0 / 15f64.sqrt(),
            1.0 / 30f64.sqrt(),
        ];
        for (t, o) in terms.iter().zip(oracle) {
            assert_relative_eq!(*t, o, max_relative = 1e-14);
        }
        let rounded = [0.0481, 0.0152, 0.2184, 0.2582, 0.1826];
        for (t, r) in terms.iter().zip(rounded) {
            assert!((t - r).abs() < 5e-5, "{t} vs {r}");
        }
        let p = theorem1_params(1, 1, &unit, &AccuracyBudget { c: 1.0, sigma2: 0.0 }, Sampling::FullPass).unwrap();
        assert_eq!(p.alpha, terms[1]);
        assert!((p.coupling(1.0) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn binding_drift_bound_is_respected() {
        // Large c and n make the fifth term bind.
        let curv = CurvatureConstants::new(1.0, 1.0).unwrap();
        for n in [1usize, 3, 7, 30, 1000] {
            let terms = theorem1_alpha_terms(n, &curv, 1e-9);
            let p = theorem1_params(n, 5, &curv, &AccuracyBudget { c: 1e-9, sigma2: 0.0 }, Sampling::FullPass).unwrap();
            assert!(p.feasible(1.0), "n = {n}, terms {terms:?}");
        }
    }

    #[test]
    fn benchmark_counts() {
        let unit = CurvatureConstants::new(1.0, 1.0).unwrap();
        let init = BenchmarkInit { delta0: 1.0, delta0_prime: 1.0 };
        let p = benchmark_params(2, 4, &unit, &AccuracyBudget { c: 5.0, sigma2: 1.0 }, &init, Sampling::FullPass).unwrap();
        assert_eq!(p.tau, 1);
        let p = benchmark_params(10, 10, &unit, &AccuracyBudget { c: 1.0, sigma2: 0.0 }, &init, Sampling::FullPass).unwrap();
        assert_eq!(p.rounds, 38);
        assert_eq!(p.rounds, (6.0 * 500f64.ln()).ceil() as usize);
        assert!(p.feasible(1.0));
        let err = benchmark_params(1, 1, &unit, &AccuracyBudget { c: 5.0, sigma2: 0.0 }, &init, Sampling::FullPass);
        assert!(err.unwrap_err().to_string().contains("c too large"));
    }

    #[test]
    fn monotone_descent_on_quadratic() {
        let spec = LossSpec::ridge(0.5, 2).unwrap();
        let shards: Vec<Shard> = (0..4)
            .map(|i| {
                let f = i as f64;
                Shard::new(
                    i,
                    vec![
                        Sample::new(vec![1.0 + f, -0.5], f - 1.0),
                        Sample::new(vec![0.2, 2.0 - f], 3.0 - f),
                    ],
                )
                .unwrap()
            })
            .collect();
        let refs: Vec<&Shard> = shards.iter().collect();
        let curv = losses::curvature(&spec, &refs).unwrap();
        let p = theorem1_params(4, 2, &curv, &AccuracyBudget { c: 1.0, sigma2: 0.0 }, Sampling::FullPass).unwrap();
        let mut state = SolverState::new(Model(vec![4.0, -3.0]), 4);
        let mut prev = losses::empirical_risk(&spec, &state.w, &refs).unwrap();
        let mut r = rng();
        for _ in 0..50 {
            state = fedgate_round(&state, &refs, &p, &spec, &mut r).unwrap();
            let cur = losses::empirical_risk(&spec, &state.w, &refs).unwrap();
            assert!(cur <= prev + 1e-15, "{cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn sigma2_examples() {
        let spec = LossSpec::ridge(0.0, 1).unwrap();
        // Per-sample gradients at w = 0 are 0 and −2 around the mean −1.
        let shard = Shard::new(0, vec![Sample::new(vec![1.0], 0.0), Sample::new(vec![1.0], 2.0)]).unwrap();
        let w = [0.0];
        let full = estimate_sigma2(&spec, &[&shard], &w, Sampling::FullPass, 10, &mut rng()).unwrap();
        assert_eq!(full, 0.0);
        for (batch, var) in [(1, 1.0), (2, 0.5)] {
            let sampling = Sampling::WithReplacement { batch_size: batch };
            let est = estimate_sigma2(&spec, &[&shard], &w, sampling, 100_000, &mut rng()).unwrap();
            assert!((est - var).abs() / var < 0.02, "batch {batch}: {est}");
        }
        let sampling = Sampling::WithReplacement { batch_size: 1 };
        let a = estimate_sigma2(&spec, &[&shard], &w, sampling, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = estimate_sigma2(&spec, &[&shard], &w, sampling, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(estimate_sigma2(&spec, &[&shard], &w, sampling, 1, &mut rng()).is_err());
    }
}
