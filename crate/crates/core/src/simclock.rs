//! Simulated wall-clock accounting and closed-form runtime analysis.
//!
//! A synchronous round costs the slowest participant's local work plus a
//! fixed communication cost. The same accounting backs the closed-form
//! runtime expressions for the doubling schedule and for full participation,
//! and the order-statistics identities for exponential unit times.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flanp::schedule;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// `tau · max(times) + comm_cost`
pub fn round_duration(participant_times: &[f64], tau: usize, comm_cost: f64) -> Result<f64> {
    let slowest = max_time(participant_times)?;
    Ok(tau as f64 * slowest + comm_cost)
}

/// Round time when client `i` runs its own number of local steps:
/// `max_i(tau_i · T_i) + comm_cost`.
pub fn round_duration_per_node(participant_times: &[f64], taus: &[usize], comm_cost: f64) -> Result<f64> {
    if participant_times.is_empty() {
        return Err(Error::Empty("participant list"));
    }
    if participant_times.len() != taus.len() {
        return Err(Error::DimensionMismatch {
            expected: participant_times.len(),
            got: taus.len(),
        });
    }
    let slowest = participant_times
        .iter()
        .zip(taus)
        .map(|(t, &k)| k as f64 * t)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(slowest + comm_cost)
}

fn max_time(times: &[f64]) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::Empty("participant list"));
    }
    Ok(times.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Time charged to one stage.
///
/// Rounds that all run on the same unit time are kept as an integer count of
/// local-update units, so a stage of `R` rounds of `tau` updates costs exactly
/// `(R·tau)·T` instead of an `R`-fold floating-point sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageClock {
    pub stage_n: usize,
    pub rounds: usize,
    units: u64,
    unit_time: Option<f64>,
    irregular: f64,
    comm_cost: f64,
}

impl StageClock {
    fn new(stage_n: usize, comm_cost: f64) -> Self {
        Self {
            stage_n,
            rounds: 0,
            units: 0,
            unit_time: None,
            irregular: 0.0,
            comm_cost,
        }
    }

    pub fn time(&self) -> f64 {
        let regular = self.unit_time.map_or(0.0, |t| self.units as f64 * t);
        regular + self.irregular + self.rounds as f64 * self.comm_cost
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClockLedger {
    stages: Vec<StageClock>,
}

impl ClockLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_stage(&mut self, stage_n: usize, comm_cost: f64) {
        self.stages.push(StageClock::new(stage_n, comm_cost));
    }

    fn current(&mut self) -> &mut StageClock {
        if self.stages.is_empty() {
            self.begin_stage(0, 0.0);
        }
        self.stages.last_mut().expect("stage just opened")
    }

    /// Charges a round in which the slowest participant runs `units` local
    /// updates at `unit_time` each.
    pub fn charge_uniform(&mut self, units: u64, unit_time: f64) {
        let stage = self.current();
        stage.rounds += 1;
        match stage.unit_time {
            None => {
                stage.unit_time = Some(unit_time);
                stage.units = units;
            }
            Some(t) if t == unit_time => stage.units += units,
            Some(_) => stage.irregular += units as f64 * unit_time,
        }
    }

    /// Charges a round whose compute time does not decompose into units.
    pub fn charge_irregular(&mut self, compute_time: f64) {
        let stage = self.current();
        stage.rounds += 1;
        stage.irregular += compute_time;
    }

    pub fn stages(&self) -> &[StageClock] {
        &self.stages
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().fold(0.0, |acc, s| acc + s.time())
    }
}

/// Memoized harmonic numbers `H_0 = 0, H_1, …, H_n`.
#[derive(Debug, Clone)]
pub struct HarmonicTable {
    values: Vec<f64>,
}

impl HarmonicTable {
    pub fn new(n: usize) -> Self {
        let mut values = Vec::with_capacity(n + 1);
        values.push(0.0);
        for k in 1..=n {
            values.push(values[k - 1] + 1.0 / k as f64);
        }
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, n: usize) -> f64 {
        self.values[n]
    }
}

fn check_sorted(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Empty("unit times"));
    }
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("unit times must be sorted ascending"));
    }
    Ok(())
}

/// One stage of a staged run: `(participants, rounds, local updates)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub n: usize,
    pub rounds: usize,
    pub tau: usize,
}

/// `Σ_stages (R_n·τ_n)·T_n` with `T_n` the `n`-th fastest unit time.
pub fn expected_time_staged(sorted_times: &[f64], stages: &[StagePlan]) -> Result<f64> {
    check_sorted(sorted_times)?;
    let mut total = 0.0;
    for stage in stages {
        if stage.n == 0 || stage.n > sorted_times.len() {
            return Err(Error::invalid(format!(
                "stage size {} outside 1..={}",
                stage.n,
                sorted_times.len()
            )));
        }
        total += (stage.rounds as u64 * stage.tau as u64) as f64 * sorted_times[stage.n - 1];
    }
    Ok(total)
}

/// Runtime of the doubling schedule with the same `R` and `tau` at every
/// stage: `R·tau·(T_{n0} + T_{2n0} + ⋯ + T_N)` over the clamped schedule.
pub fn expected_time_flanp(sorted_times: &[f64], n0: usize, rounds: usize, tau: usize) -> Result<f64> {
    let plan: Vec<StagePlan> = schedule(n0, sorted_times.len())?
        .sizes()
        .iter()
        .map(|&n| StagePlan { n, rounds, tau })
        .collect();
    expected_time_staged(sorted_times, &plan)
}

/// `18·ln(6)·κ·s·σ²/c · (T_{n0} + T_{2n0} + ⋯ + T_N)`, the doubling-schedule
/// runtime with the real-valued stage round count and local update count.
pub fn expected_time_flanp_closed(
    sorted_times: &[f64],
    n0: usize,
    kappa: f64,
    s: usize,
    sigma2: f64,
    c: f64,
) -> Result<f64> {
    check_sorted(sorted_times)?;
    if c <= 0.0 {
        return Err(Error::invalid("c must be positive"));
    }
    let sum: f64 = schedule(n0, sorted_times.len())?
        .sizes()
        .iter()
        .map(|&n| sorted_times[n - 1])
        .sum();
    Ok(18.0 * 6f64.ln() / c * kappa * s as f64 * sigma2 * sum)
}

/// `7.5·κ·s·σ²/c · ln(5·Δ₀·N·s/c) · T_N`, the full-participation runtime.
pub fn expected_time_fedgate(
    t_slowest: f64,
    kappa: f64,
    s: usize,
    sigma2: f64,
    c: f64,
    delta0: f64,
    n: usize,
) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::invalid("c must be positive"));
    }
    let arg = 5.0 * delta0 * n as f64 * s as f64 / c;
    if !(arg > 1.0) {
        return Err(Error::invalid(format!(
            "log argument 5·Δ₀·N·s/c = {arg} must exceed 1"
        )));
    }
    Ok(7.5 / c * kappa * s as f64 * sigma2 * arg.ln() * t_slowest)
}

/// `E[T_(i)] = H_N − H_{N−i}` for `N` i.i.d. exp(1) times.
pub fn order_stat_mean(n: usize, i: usize) -> Result<f64> {
    if i == 0 || i > n {
        return Err(Error::invalid(format!("rank {i} outside 1..={n}")));
    }
    let table = HarmonicTable::new(n);
    Ok(table.get(n) - table.get(n - i))
}

/// `Σ_{i ∈ schedule(n0, N)} E[T_(i)] / E[T_(N)]` for exp(1) times.
pub fn doubling_ratio(n: usize, n0: usize) -> Result<f64> {
    let table = HarmonicTable::new(n);
    let numerator: f64 = schedule(n0, n)?
        .sizes()
        .iter()
        .map(|&i| table.get(n) - table.get(n - i))
        .sum();
    Ok(numerator / table.get(n))
}

/// Ratio of the closed-form doubling-schedule runtime to the closed-form
/// full-participation runtime, with exp(λ) unit times replaced by their
/// expected order statistics. `λ` cancels.
pub fn analytic_speedup_ratio(n: usize, n0: usize, c: f64, delta0: f64, s: usize) -> Result<f64> {
    let arg = 5.0 * delta0 * n as f64 * s as f64 / c;
    if !(arg > 1.0) {
        return Err(Error::invalid(format!(
            "log argument 5·Δ₀·N·s/c = {arg} must exceed 1"
        )));
    }
    Ok(12.0 * 6f64.ln() / (5.0 * arg.ln()) * doubling_ratio(n, n0)?)
}

const MC_BLOCK: usize = 4096;

/// Per-rank empirical means of sorted exp(`rate`) samples over `trials`
/// fleets of size `n`.
///
/// Trials are split into fixed blocks, each with its own ChaCha stream, and
/// block sums are reduced in block order, so the result does not depend on
/// the thread count. Draws are standard exponentials divided by `rate`.
pub fn monte_carlo_order_stats(n: usize, rate: f64, trials: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("fleet size must be at least 1"));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::invalid(format!("rate must be positive, got {rate}")));
    }
    let blocks = trials.div_ceil(MC_BLOCK);
    let partials: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let count = MC_BLOCK.min(trials - b * MC_BLOCK);
            let mut sums = vec![0.0; n];
            let mut draw = vec![0.0; n];
            for _ in 0..count {
                for v in draw.iter_mut() {
                    let e: f64 = Exp1.sample(&mut rng);
                    *v = e / rate;
                }
                draw.sort_by(f64::total_cmp);
                for (s, v) in sums.iter_mut().zip(&draw) {
                    *s += v;
                }
            }
            sums
        })
        .collect();
    let mut totals = vec![0.0; n];
    for block in &partials {
        for (t, s) in totals.iter_mut().zip(block) {
            *t += s;
        }
    }
    Ok(totals.into_iter().map(|t| t / trials as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn round_duration_examples() {
        assert_eq!(round_duration(&[50.0, 120.0], 10, 0.0).unwrap(), 1200.0);
        assert_eq!(round_duration(&[3.5], 4, 1.0).unwrap(), 15.0);
        assert_eq!(round_duration(&[2.0], 1, 5.0).unwrap(), 7.0);
        assert!(round_duration(&[], 1, 0.0).is_err());
    }

    #[test]
    fn per_node_round_duration() {
        assert_eq!(round_duration_per_node(&[1.0, 3.0], &[5, 1], 0.5).unwrap(), 5.5);
        assert!(round_duration_per_node(&[1.0], &[1, 2], 0.0).is_err());
    }

    #[test]
    fn ledger_sums_stages() {
        let mut ledger = ClockLedger::new();
        ledger.begin_stage(1, 0.0);
        for _ in 0..3 {
            ledger.charge_uniform(2, 1.5);
        }
        ledger.begin_stage(2, 1.0);
        ledger.charge_uniform(2, 4.0);
        ledger.charge_irregular(3.0);
        assert_eq!(ledger.stages()[0].time(), 9.0);
        assert_eq!(ledger.stages()[1].time(), 8.0 + 3.0 + 2.0);
        let by_stage: f64 = ledger.stages().iter().map(StageClock::time).sum();
        assert_eq!(ledger.total(), by_stage);
    }

    #[test]
    fn harmonic_recurrence_and_sandwich() {
        let table = HarmonicTable::new(1_000_000);
        assert_eq!(table.get(1), 1.0);
        assert_relative_eq!(table.get(4), 25.0 / 12.0, epsilon = 1e-15);
        for n in 2..=1_000_000usize {
            let h = table.get(n);
            let nf = n as f64;
            assert!(nf.ln() + EULER_GAMMA <= h, "lower bound at {n}");
            assert!(h <= (nf + 1.0).ln() + EULER_GAMMA, "upper bound at {n}");
        }
    }

    #[test]
    fn expected_time_flanp_examples() {
        assert_eq!(expected_time_flanp(&[1.0, 2.0, 3.0, 4.0], 1, 2, 3).unwrap(), 42.0);
        let times = [0.5, 0.7, 2.0];
        assert_eq!(expected_time_flanp(&times, 3, 4, 2).unwrap(), 4.0 * 2.0 * 2.0);
        assert!(expected_time_flanp(&[2.0, 1.0], 1, 1, 1).is_err());
    }

    #[test]
    fn expected_time_flanp_stage_bound() {
        // Each summand is at most T_N; the clamped schedule has
        // ⌈log₂(N/n0)⌉ + 1 stages.
        let times: Vec<f64> = (1..=13).map(|i| i as f64 * 0.37).collect();
        for n0 in 1..=13 {
            let stages = schedule(n0, 13).unwrap().sizes().len();
            let bound = 5.0 * 2.0 * stages as f64 * times[12];
            assert!(expected_time_flanp(&times, n0, 5, 2).unwrap() <= bound);
        }
    }

    #[test]
    fn closed_forms() {
        let fedgate = expected_time_fedgate(1.0, 1.0, 1, 1.0, 1.0, 1.0, 1).unwrap();
        assert_relative_eq!(fedgate, 7.5 * 5f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(fedgate, 12.0708, epsilon = 1e-4);
        let doubled = expected_time_fedgate(2.0, 1.0, 1, 1.0, 1.0, 1.0, 1).unwrap();
        assert_eq!(doubled, 2.0 * fedgate);
        assert!(expected_time_fedgate(1.0, 1.0, 1, 1.0, 5.0, 1.0, 1).is_err());

        let times = [1.0, 2.0, 3.0, 4.0];
        let closed = expected_time_flanp_closed(&times, 1, 2.0, 10, 0.5, 3.0).unwrap();
        let expected = 18.0 * 6f64.ln() / 3.0 * 2.0 * 10.0 * 0.5 * 7.0;
        assert_relative_eq!(closed, expected, epsilon = 1e-12);
    }

    #[test]
    fn order_stat_examples() {
        assert_relative_eq!(order_stat_mean(4, 4).unwrap(), 25.0 / 12.0, epsilon = 1e-15);
        assert_eq!(order_stat_mean(2, 1).unwrap(), 0.5);
        assert_eq!(order_stat_mean(1, 1).unwrap(), 1.0);
        assert!(order_stat_mean(3, 0).is_err());
        assert!(order_stat_mean(3, 4).is_err());
    }

    #[test]
    fn order_stat_telescopes() {
        for n in [1, 2, 7, 64, 1000] {
            let mut prev = 0.0;
            let mut sum = 0.0;
            for i in 1..=n {
                let m = order_stat_mean(n, i).unwrap();
                sum += m - prev;
                prev = m;
            }
            assert_relative_eq!(sum, HarmonicTable::new(n).get(n), epsilon = 1e-12);
        }
    }

    #[test]
    fn doubling_ratio_examples() {
        assert_relative_eq!(doubling_ratio(2, 1).unwrap(), 4.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(doubling_ratio(4, 1).unwrap(), 1.4, epsilon = 1e-12);
        for k in 1..=10 {
            let n = 1usize << k;
            assert!(doubling_ratio(n, 1).unwrap() <= 2.0 + 1.0 / n as f64);
        }
    }

    #[test]
    fn analytic_ratio_decreases_with_sample_count() {
        let mut prev = f64::INFINITY;
        for (n, s) in [(8, 10), (16, 10), (16, 100), (64, 100), (64, 1000), (512, 1000)] {
            let r = analytic_speedup_ratio(n, 1, 1.0, 1.0, s).unwrap();
            assert!(r < prev, "ratio {r} at N={n}, s={s}");
            prev = r;
        }
    }

    #[test]
    fn monte_carlo_examples() {
        let m = monte_carlo_order_stats(2, 1.0, 100_000, 3).unwrap();
        assert!((m[0] - 0.5).abs() / 0.5 < 0.02);
        assert!((m[1] - 1.5).abs() / 1.5 < 0.02);

        let half = monte_carlo_order_stats(5, 2.0, 1000, 9).unwrap();
        let unit = monte_carlo_order_stats(5, 1.0, 1000, 9).unwrap();
        for (a, b) in half.iter().zip(&unit) {
            assert_relative_eq!(*a, b / 2.0, epsilon = 1e-14);
        }

        let single = monte_carlo_order_stats(4, 1.0, 1, 5).unwrap();
        assert!(single.windows(2).all(|w| w[0] <= w[1]));
        assert!(monte_carlo_order_stats(0, 1.0, 10, 0).is_err());
    }

    #[test]
    fn monte_carlo_is_thread_count_independent() {
        let a = monte_carlo_order_stats(8, 1.0, 20_000, 17).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| monte_carlo_order_stats(8, 1.0, 20_000, 17).unwrap());
        assert_eq!(a, b);
    }
}
