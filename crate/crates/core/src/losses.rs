//! Strongly convex per-sample losses and the empirical risks built from them.
//!
//! Risks are always accumulated node-major: each shard's risk is the plain
//! sequential average of its samples, and shard risks are combined with a
//! running mean in shard order. The order is fixed so results are reproducible
//! bit for bit, and a running mean makes averaging `n` identical shards return
//! the single-shard value exactly.

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{self, RunningMean};

/// One labeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    fn is_finite(&self) -> bool {
        self.y.is_finite() && vector::all_finite(&self.x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½(y − w·x)² + (reg/2)‖w‖²`
    RidgeLinear,
    /// `log(1 + exp(−y·w·x)) + (reg/2)‖w‖²` with labels in {−1, +1}.
    RegLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub reg: f64,
    pub dim: usize,
}

impl LossSpec {
    pub fn new(kind: LossKind, reg: f64, dim: usize) -> Result<Self> {
        let spec = Self { kind, reg, dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ridge(reg: f64, dim: usize) -> Result<Self> {
        Self::new(LossKind::RidgeLinear, reg, dim)
    }

    pub fn logistic(reg: f64, dim: usize) -> Result<Self> {
        Self::new(LossKind::RegLogistic, reg, dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("loss dimension must be at least 1"));
        }
        if !self.reg.is_finite() {
            return Err(Error::NonFinite("regularization"));
        }
        match self.kind {
            LossKind::RidgeLinear if self.reg < 0.0 => {
                Err(Error::invalid("ridge regularization must be nonnegative"))
            }
            LossKind::RegLogistic if self.reg <= 0.0 => Err(Error::invalid(
                "logistic regularization must be positive for strong convexity",
            )),
            _ => Ok(()),
        }
    }

    /// Checks that every label is admissible for this loss.
    pub fn check_labels<'a>(&self, shards: impl IntoIterator<Item = &'a Shard>) -> Result<()> {
        if self.kind == LossKind::RegLogistic {
            for shard in shards {
                if let Some(z) = shard.samples().iter().find(|z| z.y != 1.0 && z.y != -1.0) {
                    return Err(Error::invalid(format!(
                        "logistic labels must be -1 or +1, node {} has {}",
                        shard.node_id(),
                        z.y
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Strong-convexity modulus and gradient Lipschitz constant of a risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureConstants {
    pub mu: f64,
    pub lip: f64,
    pub kappa: f64,
}

impl CurvatureConstants {
    pub fn new(mu: f64, lip: f64) -> Result<Self> {
        if !(mu.is_finite() && lip.is_finite()) {
            return Err(Error::NonFinite("curvature"));
        }
        if mu <= 0.0 {
            return Err(Error::NotStronglyConvex { mu });
        }
        if mu > lip {
            return Err(Error::invalid(format!("mu ({mu}) exceeds lip ({lip})")));
        }
        Ok(Self {
            mu,
            lip,
            kappa: lip / mu,
        })
    }

    /// Constants valid for every risk in `parts`: the smallest modulus and the
    /// largest Lipschitz constant.
    pub fn envelope(parts: impl IntoIterator<Item = CurvatureConstants>) -> Option<Self> {
        parts.into_iter().reduce(|a, b| {
            let mu = a.mu.min(b.mu);
            let lip = a.lip.max(b.lip);
            CurvatureConstants {
                mu,
                lip,
                kappa: lip / mu,
            }
        })
    }
}

/// One client's fixed local data. All shards of a fleet hold the same number
/// of samples of the same dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    node_id: usize,
    samples: Vec<Sample>,
}

impl Shard {
    pub fn new(node_id: usize, samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("shard samples"))?;
        let dim = first.dim();
        if dim == 0 {
            return Err(Error::invalid("samples must have at least one feature"));
        }
        for z in &samples {
            if z.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: z.dim(),
                });
            }
            if !z.is_finite() {
                return Err(Error::NonFinite("sample"));
            }
        }
        Ok(Self { node_id, samples })
    }

    pub fn node_id(&self) -> usize {
        self.node_id
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }
}

/// A dense model vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Model(pub Vec<f64>);

impl Model {
    pub fn zeros(dim: usize) -> Self {
        Model(vec![0.0; dim])
    }

    pub fn norm(&self) -> f64 {
        vector::norm_sq(&self.0).sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Model {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Model {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Model {
    fn from(w: Vec<f64>) -> Self {
        Model(w)
    }
}

/// How a local gradient is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    /// Exact local gradient over the whole shard.
    FullPass,
    /// Mean over `batch_size` samples drawn uniformly with replacement.
    WithReplacement { batch_size: usize },
}

fn check_dim(spec: &LossSpec, got: usize) -> Result<()> {
    if got != spec.dim {
        return Err(Error::DimensionMismatch {
            expected: spec.dim,
            got,
        });
    }
    Ok(())
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `1 / (1 + e^t)`
fn logistic_weight(t: f64) -> f64 {
    if t >= 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

/// Data-fit part of the loss (without the regularizer).
#[inline]
fn data_loss(kind: LossKind, w: &[f64], z: &Sample) -> f64 {
    let p = vector::dot(w, &z.x);
    match kind {
        LossKind::RidgeLinear => 0.5 * (z.y - p) * (z.y - p),
        LossKind::RegLogistic => softplus(-z.y * p),
    }
}

/// Scalar `g` such that the data-fit gradient is `g·x`.
#[inline]
fn data_grad_coef(kind: LossKind, w: &[f64], z: &Sample) -> f64 {
    let p = vector::dot(w, &z.x);
    match kind {
        LossKind::RidgeLinear => p - z.y,
        LossKind::RegLogistic => -z.y * logistic_weight(z.y * p),
    }
}

fn reg_value(spec: &LossSpec, w: &[f64]) -> f64 {
    if spec.reg == 0.0 {
        0.0
    } else {
        0.5 * spec.reg * vector::norm_sq(w)
    }
}

pub fn loss_value(spec: &LossSpec, w: &[f64], z: &Sample) -> Result<f64> {
    check_dim(spec, w.len())?;
    check_dim(spec, z.dim())?;
    if !vector::all_finite(w) || !z.is_finite() {
        return Err(Error::NonFinite("loss input"));
    }
    if spec.kind == LossKind::RegLogistic && z.y != 1.0 && z.y != -1.0 {
        return Err(Error::invalid("logistic labels must be -1 or +1"));
    }
    Ok(data_loss(spec.kind, w, z) + reg_value(spec, w))
}

pub fn gradient(spec: &LossSpec, w: &[f64], z: &Sample) -> Result<Vec<f64>> {
    check_dim(spec, w.len())?;
    check_dim(spec, z.dim())?;
    if !vector::all_finite(w) || !z.is_finite() {
        return Err(Error::NonFinite("gradient input"));
    }
    let g = data_grad_coef(spec.kind, w, z);
    Ok(w.iter()
        .zip(&z.x)
        .map(|(wi, xi)| g * xi + spec.reg * wi)
        .collect())
}

/// `L^i(w)`, the average loss over one shard.
pub fn local_risk(spec: &LossSpec, w: &[f64], shard: &Shard) -> Result<f64> {
    check_dim(spec, w.len())?;
    check_dim(spec, shard.dim())?;
    Ok(local_risk_unchecked(spec, w, shard))
}

fn local_risk_unchecked(spec: &LossSpec, w: &[f64], shard: &Shard) -> f64 {
    let sum: f64 = shard
        .samples()
        .iter()
        .map(|z| data_loss(spec.kind, w, z))
        .sum();
    sum / shard.len() as f64 + reg_value(spec, w)
}

/// `∇L^i(w)`, the exact gradient of one shard's risk.
pub fn local_gradient(spec: &LossSpec, w: &[f64], shard: &Shard) -> Result<Vec<f64>> {
    check_dim(spec, w.len())?;
    check_dim(spec, shard.dim())?;
    Ok(local_gradient_unchecked(spec, w, shard))
}

pub(crate) fn local_gradient_unchecked(spec: &LossSpec, w: &[f64], shard: &Shard) -> Vec<f64> {
    let mut acc = vec![0.0; w.len()];
    for z in shard.samples() {
        let g = data_grad_coef(spec.kind, w, z);
        vector::axpy(g, &z.x, &mut acc);
    }
    finish_gradient(spec, w, acc, shard.len())
}

fn finish_gradient(spec: &LossSpec, w: &[f64], mut acc: Vec<f64>, count: usize) -> Vec<f64> {
    let inv = 1.0 / count as f64;
    for (a, wi) in acc.iter_mut().zip(w) {
        *a = *a * inv + spec.reg * wi;
    }
    acc
}

/// `L_n(w)` over the given shards (node-major, running mean across nodes).
pub fn empirical_risk(spec: &LossSpec, w: &[f64], shards: &[&Shard]) -> Result<f64> {
    check_shards(spec, w, shards)?;
    Ok(vector::running_mean_scalar(
        shards.iter().map(|s| local_risk_unchecked(spec, w, s)),
    ))
}

/// `∇L_n(w)` over the given shards.
pub fn empirical_gradient(spec: &LossSpec, w: &[f64], shards: &[&Shard]) -> Result<Vec<f64>> {
    check_shards(spec, w, shards)?;
    let mut mean = RunningMean::new(w.len());
    for s in shards {
        mean.push(&local_gradient_unchecked(spec, w, s));
    }
    Ok(mean.finish())
}

fn check_shards(spec: &LossSpec, w: &[f64], shards: &[&Shard]) -> Result<()> {
    let first = shards.first().ok_or(Error::Empty("shard list"))?;
    check_dim(spec, w.len())?;
    let s = first.len();
    for shard in shards {
        check_dim(spec, shard.dim())?;
        if shard.len() != s {
            return Err(Error::invalid(format!(
                "shards must have equal size: node {} has {} samples, expected {s}",
                shard.node_id(),
                shard.len()
            )));
        }
    }
    Ok(())
}

/// A local gradient estimate per `sampling`. With [`Sampling::FullPass`] the
/// result is the exact `∇L^i(w)` and `rng` is untouched.
pub fn stochastic_gradient<R: Rng + ?Sized>(
    spec: &LossSpec,
    w: &[f64],
    shard: &Shard,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dim(spec, w.len())?;
    check_dim(spec, shard.dim())?;
    if let Sampling::WithReplacement { batch_size } = sampling {
        if batch_size == 0 || batch_size > shard.len() {
            return Err(Error::invalid(format!(
                "batch size {batch_size} outside 1..={}",
                shard.len()
            )));
        }
    }
    Ok(stochastic_gradient_unchecked(spec, w, shard, sampling, rng))
}

pub(crate) fn stochastic_gradient_unchecked<R: Rng + ?Sized>(
    spec: &LossSpec,
    w: &[f64],
    shard: &Shard,
    sampling: Sampling,
    rng: &mut R,
) -> Vec<f64> {
    match sampling {
        Sampling::FullPass => local_gradient_unchecked(spec, w, shard),
        Sampling::WithReplacement { batch_size } => {
            let samples = shard.samples();
            let mut acc = vec![0.0; w.len()];
            for _ in 0..batch_size {
                let z = &samples[rng.random_range(0..samples.len())];
                let g = data_grad_coef(spec.kind, w, z);
                vector::axpy(g, &z.x, &mut acc);
            }
            finish_gradient(spec, w, acc, batch_size)
        }
    }
}

/// Second-moment matrix `G = avg x xᵀ` over every sample of every shard.
fn second_moment(shards: &[&Shard], dim: usize) -> DMatrix<f64> {
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    let mut count = 0usize;
    for shard in shards {
        for z in shard.samples() {
            let x = DVector::from_column_slice(&z.x);
            g.ger(1.0, &x, &x, 1.0);
            count += 1;
        }
    }
    g / count as f64
}

fn extreme_eigenvalues(g: DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(g);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Curvature constants of the empirical risk over `shards`.
///
/// Ridge uses the exact spectrum of the Hessian `G + reg·I`. Logistic uses
/// `mu = reg` and the `¼·λ_max(G)` bound on the data-fit Hessian.
pub fn curvature(spec: &LossSpec, shards: &[&Shard]) -> Result<CurvatureConstants> {
    let first = shards.first().ok_or(Error::Empty("shard list"))?;
    check_dim(spec, first.dim())?;
    let (lo, hi) = extreme_eigenvalues(second_moment(shards, spec.dim));
    let (mu, lip) = match spec.kind {
        LossKind::RidgeLinear => (lo.max(0.0) + spec.reg, hi + spec.reg),
        LossKind::RegLogistic => (spec.reg, spec.reg + 0.25 * hi),
    };
    // Eigenvalues of a rank-deficient G come back as rounding noise around 0.
    if mu <= 1e-12 * lip.max(f64::MIN_POSITIVE) {
        return Err(Error::NotStronglyConvex { mu });
    }
    CurvatureConstants::new(mu, lip)
}

/// Minimizer of the empirical risk over `shards`.
///
/// Ridge solves the normal equations directly; logistic runs damped Newton
/// until the gradient norm is at most `1e-12`.
pub fn optimum(spec: &LossSpec, shards: &[&Shard]) -> Result<Model> {
    check_shards(spec, &vec![0.0; spec.dim], shards)?;
    match spec.kind {
        LossKind::RidgeLinear => ridge_optimum(spec, shards),
        LossKind::RegLogistic => logistic_optimum(spec, shards),
    }
}

fn ridge_optimum(spec: &LossSpec, shards: &[&Shard]) -> Result<Model> {
    curvature(spec, shards).map_err(|e| match e {
        Error::NotStronglyConvex { .. } => Error::Singular,
        other => other,
    })?;
    let d = spec.dim;
    let mut h = second_moment(shards, d);
    for i in 0..d {
        h[(i, i)] += spec.reg;
    }
    let chol = h.cholesky().ok_or(Error::Singular)?;
    let mut b = DVector::<f64>::zeros(d);
    let mut count = 0usize;
    for shard in shards {
        for z in shard.samples() {
            b.axpy(z.y, &DVector::from_column_slice(&z.x), 1.0);
            count += 1;
        }
    }
    b /= count as f64;
    let mut w = chol.solve(&b);
    // One refinement step against the canonical gradient summation.
    let g = empirical_gradient(spec, w.as_slice(), shards)?;
    w -= chol.solve(&DVector::from_vec(g));
    Ok(Model(w.as_slice().to_vec()))
}

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-12;
/// Accepted once Newton stops making progress. The risk error of such an
/// iterate is at most `‖g‖²/(2μ)`, far below any statistical accuracy.
const NEWTON_STALL_TOL: f64 = 1e-8;

fn logistic_hessian(spec: &LossSpec, w: &[f64], shards: &[&Shard]) -> DMatrix<f64> {
    let d = spec.dim;
    let mut h = DMatrix::<f64>::zeros(d, d);
    let mut count = 0usize;
    for shard in shards {
        for z in shard.samples() {
            let p = logistic_weight(z.y * vector::dot(w, &z.x));
            let x = DVector::from_column_slice(&z.x);
            h.ger(p * (1.0 - p), &x, &x, 1.0);
            count += 1;
        }
    }
    h /= count as f64;
    for i in 0..d {
        h[(i, i)] += spec.reg;
    }
    h
}

fn logistic_optimum(spec: &LossSpec, shards: &[&Shard]) -> Result<Model> {
    let mut w = vec![0.0; spec.dim];
    let mut f = empirical_risk(spec, &w, shards)?;
    let mut grad_norm = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..NEWTON_MAX_ITERS {
        let g = empirical_gradient(spec, &w, shards)?;
        let gn = vector::norm_sq(&g).sqrt();
        if gn <= NEWTON_TOL {
            return Ok(Model(w));
        }
        if gn >= grad_norm {
            stalled += 1;
        }
        grad_norm = gn;
        // Rounding in the gradient sum can floor above the target.
        if stalled >= 3 && gn <= NEWTON_STALL_TOL {
            return Ok(Model(w));
        }
        let h = logistic_hessian(spec, &w, shards);
        let chol = h.cholesky().ok_or(Error::Singular)?;
        let step = chol.solve(&DVector::from_vec(g.clone()));
        let decrement = vector::dot(step.as_slice(), &g);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = w
                .iter()
                .zip(step.iter())
                .map(|(wi, si)| wi - t * si)
                .collect();
            let fc = empirical_risk(spec, &cand, shards)?;
            if fc <= f - 0.25 * t * decrement || t < 1e-10 {
                w = cand;
                f = fc.min(f);
                break;
            }
            t *= 0.5;
        }
    }
    let g = empirical_gradient(spec, &w, shards)?;
    let gn = vector::norm_sq(&g).sqrt();
    if gn <= NEWTON_STALL_TOL {
        return Ok(Model(w));
    }
    Err(Error::NewtonNonConvergence {
        iterations: NEWTON_MAX_ITERS,
        grad_norm: gn,
    })
}
