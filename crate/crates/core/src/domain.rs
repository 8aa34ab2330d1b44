//! Core types and loss arithmetic for online portfolio selection.
//!
//! Every market round is normalized once at ingestion so that its best asset
//! has price relative exactly 1. Learners that play the clipped simplex
//! (every weight at least `1/(NT)`) then always see an inner product
//! `<x, r>` in `[1/(NT), 1]`, which keeps losses and gradients finite.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack on `sum(x) == 1`.
pub const SUM_TOL: f64 = 1e-9;
/// Slack on the clipped-simplex floor `x_i >= 1/(NT)`.
pub const FLOOR_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("asset count must be at least 2, got {0}")]
    TooFewAssets(usize),
    #[error("horizon T={horizon} must exceed asset count N={assets}")]
    HorizonTooShort { assets: usize, horizon: usize },
    #[error("expected {expected} entries, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("entry {index} is {value}; price relatives must be finite and nonnegative")]
    InvalidEntry { index: usize, value: f64 },
    #[error("price relatives are all zero")]
    AllZero,
    #[error("weights sum to {0}, not 1")]
    NotOnSimplex(f64),
    #[error("weight {index} is {value}, below the floor {floor}")]
    BelowFloor { index: usize, value: f64, floor: f64 },
    #[error("portfolio earns nothing in this round (<x, r> = {0})")]
    ZeroWealth(f64),
}

/// Asset count `n` and horizon `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    n: usize,
    t: usize,
}

impl ProblemDims {
    pub fn new(assets: usize, horizon: usize) -> Result<Self, DomainError> {
        if assets < 2 {
            return Err(DomainError::TooFewAssets(assets));
        }
        if horizon <= assets {
            return Err(DomainError::HorizonTooShort { assets, horizon });
        }
        Ok(Self { n: assets, t: horizon })
    }

    pub fn assets(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.t
    }

    /// The clipped-simplex floor `1/(NT)`.
    pub fn floor(&self) -> f64 {
        1.0 / (self.n as f64 * self.t as f64)
    }

    /// `ln T`, the base of the learning-rate schedule's logarithm.
    pub fn ln_horizon(&self) -> f64 {
        (self.t as f64).ln()
    }

    pub fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.n as f64; self.n]
    }
}

/// One normalized vector of price relatives; its largest entry is exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarketRound(Vec<f64>);

impl MarketRound {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for MarketRound {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Divide `raw` by its largest entry.
pub fn normalize_round(raw: &[f64]) -> Result<MarketRound, DomainError> {
    for (index, &value) in raw.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(DomainError::InvalidEntry { index, value });
        }
    }
    let max = raw.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Err(DomainError::AllZero);
    }
    let mut r: Vec<f64> = raw.iter().map(|v| v / max).collect();
    // v / v is exactly 1 in IEEE arithmetic, but pin it anyway for the argmax.
    if let Some(i) = raw.iter().position(|&v| v == max) {
        r[i] = 1.0;
    }
    Ok(MarketRound(r))
}

/// A point of the clipped simplex: weights sum to one and each is at least `1/(NT)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortfolioState(Vec<f64>);

impl PortfolioState {
    pub fn new(weights: Vec<f64>, dims: &ProblemDims) -> Result<Self, DomainError> {
        check_clipped(&weights, dims)?;
        Ok(Self(weights))
    }

    pub fn uniform(dims: &ProblemDims) -> Self {
        Self(dims.uniform())
    }

    /// Wraps weights produced by the solver, which maintains the invariants itself.
    pub(crate) fn from_trusted(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for PortfolioState {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Checks membership of the full simplex.
pub fn check_simplex(x: &[f64]) -> Result<(), DomainError> {
    let sum: f64 = x.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > SUM_TOL {
        return Err(DomainError::NotOnSimplex(sum));
    }
    for (index, &value) in x.iter().enumerate() {
        if !(value >= -FLOOR_SLACK) {
            return Err(DomainError::BelowFloor { index, value, floor: 0.0 });
        }
    }
    Ok(())
}

/// Checks membership of the clipped simplex for `dims`.
pub fn check_clipped(x: &[f64], dims: &ProblemDims) -> Result<(), DomainError> {
    if x.len() != dims.assets() {
        return Err(DomainError::DimensionMismatch { expected: dims.assets(), actual: x.len() });
    }
    check_simplex(x)?;
    let floor = dims.floor();
    for (index, &value) in x.iter().enumerate() {
        if value < floor - FLOOR_SLACK {
            return Err(DomainError::BelowFloor { index, value, floor });
        }
    }
    Ok(())
}

/// Loss `-ln<x, r>` and its gradient `-r / <x, r>` at the played point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

impl LossRecord {
    pub fn grad_inf_norm(&self) -> f64 {
        self.gradient.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-loss of any simplex point. Fails only if the portfolio earns nothing.
pub fn log_loss(x: &[f64], r: &MarketRound) -> Result<LossRecord, DomainError> {
    if x.len() != r.len() {
        return Err(DomainError::DimensionMismatch { expected: r.len(), actual: x.len() });
    }
    let wealth = dot(x, r.as_slice());
    if !(wealth > 0.0) {
        return Err(DomainError::ZeroWealth(wealth));
    }
    Ok(LossRecord {
        loss: -wealth.ln(),
        gradient: r.as_slice().iter().map(|ri| -ri / wealth).collect(),
    })
}

/// Loss and gradient for a clipped-simplex point; `<x, r> >= 1/(NT)` so this cannot fail.
pub fn loss_and_gradient(x: &PortfolioState, r: &MarketRound) -> LossRecord {
    debug_assert!((r.as_slice().iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    log_loss(x.as_slice(), r).expect("clipped portfolio has positive wealth on a normalized round")
}

/// Map a full-simplex comparator into the clipped simplex:
/// `(1 - 1/T) u' + 1/(NT)`. Costs at most 2 nats of total loss.
pub fn smooth_comparator(u_prime: &[f64], dims: &ProblemDims) -> Result<PortfolioState, DomainError> {
    if u_prime.len() != dims.assets() {
        return Err(DomainError::DimensionMismatch { expected: dims.assets(), actual: u_prime.len() });
    }
    check_simplex(u_prime)?;
    let shrink = 1.0 - 1.0 / dims.horizon() as f64;
    let floor = dims.floor();
    let u: Vec<f64> = u_prime.iter().map(|&v| shrink * v.max(0.0) + floor).collect();
    Ok(PortfolioState(u))
}

/// Total log-loss of a constant-rebalanced portfolio.
pub fn crp_loss(u: &[f64], rounds: &[MarketRound]) -> f64 {
    let mut total = CompensatedSum::default();
    for r in rounds {
        total.add(-dot(u, r.as_slice()).ln());
    }
    total.value()
}

/// Neumaier summation; long loss sums otherwise lose the digits a line search needs.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}
