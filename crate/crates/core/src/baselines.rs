//! Comparison learners and the offline best constant-rebalanced portfolio.
//!
//! Learning-rate defaults follow the orders of the known regret bounds; the
//! constants are ours:
//!
//! | learner    | default rate                 | domain          |
//! |------------|------------------------------|-----------------|
//! | ONS        | `beta = 1/2`, no mixing      | clipped simplex |
//! | EG         | `sqrt(ln N / T) / G_est`     | simplex         |
//! | OGD        | `1 / sqrt(T)`                | simplex         |
//! | Soft-Bayes | `sqrt(ln N / (N T))`         | simplex         |

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::domain::{crp_loss, dot, CompensatedSum, log_loss, DomainError, LossRecord, MarketRound, PortfolioState, ProblemDims};
use crate::solver::{minimize_over_clipped_simplex, Objective, SolverConfig, SolverError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerStep {
    pub played: Vec<f64>,
    pub loss: LossRecord,
}

/// A sequential portfolio strategy: play, observe a round, update.
pub trait OnlineLearner {
    fn name(&self) -> &'static str;
    /// The portfolio that the next call to `step` will play.
    fn current(&self) -> Vec<f64>;
    fn step(&mut self, r: &MarketRound) -> Result<LearnerStep, LearnerError>;
    /// Whether plays are confined to the clipped simplex.
    fn clipped(&self) -> bool {
        false
    }
}

fn uniform_mix(x: &[f64], mix: f64) -> Vec<f64> {
    let n = x.len() as f64;
    x.iter().map(|v| (1.0 - mix) * v + mix / n).collect()
}

fn check_unit(name: &str, v: f64) -> Result<(), LearnerError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(LearnerError::InvalidParam(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn check_rate(name: &str, v: f64) -> Result<(), LearnerError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(LearnerError::InvalidParam(format!("{name} must be finite and nonnegative, got {v}")))
    }
}

/// `<x, g> + (beta/2)(x - y)^T A (x - y)`: the OMD step with a purely quadratic regularizer.
pub struct QuadraticOmdObjective<'a> {
    pub gradient: &'a [f64],
    pub anchor: &'a [f64],
    pub gram: &'a DMatrix<f64>,
    pub beta: f64,
}

impl Objective for QuadraticOmdObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let d = DVector::from_iterator(x.len(), x.iter().zip(self.anchor).map(|(a, b)| a - b));
        dot(x, self.gradient) + 0.5 * self.beta * (d.transpose() * self.gram * &d)[(0, 0)]
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let d = DVector::from_iterator(x.len(), x.iter().zip(self.anchor).map(|(a, b)| a - b));
        DVector::from_column_slice(self.gradient) + self.gram * d * self.beta
    }

    fn hessian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.gram * self.beta
    }
}

/// Online Newton Step over the clipped simplex, optionally mixed with uniform.
#[derive(Debug, Clone)]
pub struct Ons {
    dims: ProblemDims,
    beta: f64,
    mix: f64,
    gram: DMatrix<f64>,
    x: Vec<f64>,
    solver: SolverConfig,
}

impl Ons {
    pub fn new(dims: ProblemDims, beta: f64, mix: f64, solver: SolverConfig) -> Result<Self, LearnerError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(LearnerError::InvalidParam(format!("beta must be positive, got {beta}")));
        }
        check_unit("mix", mix)?;
        let n = dims.assets();
        Ok(Self { dims, beta, mix, gram: DMatrix::identity(n, n) * n as f64, x: dims.uniform(), solver })
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }
}

impl OnlineLearner for Ons {
    fn name(&self) -> &'static str {
        "ons"
    }

    fn current(&self) -> Vec<f64> {
        uniform_mix(&self.x, self.mix)
    }

    fn step(&mut self, r: &MarketRound) -> Result<LearnerStep, LearnerError> {
        let played = self.current();
        let loss = log_loss(&played, r)?;
        let g = DVector::from_column_slice(&loss.gradient);
        let gram = &self.gram + &g * g.transpose();
        let objective = QuadraticOmdObjective { gradient: &loss.gradient, anchor: &self.x, gram: &gram, beta: self.beta };
        let next = minimize_over_clipped_simplex(&objective, &self.x, &self.dims, &self.solver)?;
        self.gram = gram;
        self.x = next.x.into_inner();
        Ok(LearnerStep { played, loss })
    }

    fn clipped(&self) -> bool {
        true
    }
}

/// `x'_i ∝ x_i exp(-eta g_i)`, evaluated in log space.
pub fn eg_update(x: &[f64], gradient: &[f64], eta: f64) -> Vec<f64> {
    let logs: Vec<f64> = x.iter().zip(gradient).map(|(xi, gi)| xi.ln() - eta * gi).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Exponentiated gradient.
#[derive(Debug, Clone)]
pub struct Eg {
    eta: f64,
    mix: f64,
    x: Vec<f64>,
}

impl Eg {
    pub fn new(dims: ProblemDims, eta: f64, mix: f64) -> Result<Self, LearnerError> {
        check_rate("eta", eta)?;
        check_unit("mix", mix)?;
        Ok(Self { eta, mix, x: dims.uniform() })
    }

    pub fn default_eta(dims: &ProblemDims, grad_estimate: f64) -> f64 {
        ((dims.assets() as f64).ln() / dims.horizon() as f64).sqrt() / grad_estimate
    }
}

impl OnlineLearner for Eg {
    fn name(&self) -> &'static str {
        "eg"
    }

    fn current(&self) -> Vec<f64> {
        uniform_mix(&self.x, self.mix)
    }

    fn step(&mut self, r: &MarketRound) -> Result<LearnerStep, LearnerError> {
        let played = self.current();
        let loss = log_loss(&played, r)?;
        self.x = eg_update(&self.x, &loss.gradient, self.eta);
        Ok(LearnerStep { played, loss })
    }
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Projected online gradient descent.
#[derive(Debug, Clone)]
pub struct Ogd {
    eta: f64,
    x: Vec<f64>,
}

impl Ogd {
    pub fn new(dims: ProblemDims, eta: f64) -> Result<Self, LearnerError> {
        check_rate("eta", eta)?;
        Ok(Self { eta, x: dims.uniform() })
    }

    pub fn default_eta(dims: &ProblemDims) -> f64 {
        1.0 / (dims.horizon() as f64).sqrt()
    }
}

impl OnlineLearner for Ogd {
    fn name(&self) -> &'static str {
        "ogd"
    }

    fn current(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn step(&mut self, r: &MarketRound) -> Result<LearnerStep, LearnerError> {
        let played = self.x.clone();
        let loss = log_loss(&played, r)?;
        let moved: Vec<f64> = self.x.iter().zip(&loss.gradient).map(|(x, g)| x - self.eta * g).collect();
        self.x = project_simplex(&moved);
        Ok(LearnerStep { played, loss })
    }
}

/// `x'_i = x_i (1 - eta + eta r_i / <x, r>)`.
pub fn soft_bayes_update(x: &[f64], r: &[f64], eta: f64) -> Vec<f64> {
    let wealth = dot(x, r);
    x.iter().zip(r).map(|(xi, ri)| xi * (1.0 - eta + eta * ri / wealth)).collect()
}

#[derive(Debug, Clone)]
pub struct SoftBayes {
    eta: f64,
    x: Vec<f64>,
}

impl SoftBayes {
    pub fn new(dims: ProblemDims, eta: f64) -> Result<Self, LearnerError> {
        check_unit("eta", eta)?;
        Ok(Self { eta, x: dims.uniform() })
    }

    pub fn default_eta(dims: &ProblemDims) -> f64 {
        let n = dims.assets() as f64;
        (n.ln() / (n * dims.horizon() as f64)).sqrt()
    }
}

impl OnlineLearner for SoftBayes {
    fn name(&self) -> &'static str {
        "softbayes"
    }

    fn current(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn step(&mut self, r: &MarketRound) -> Result<LearnerStep, LearnerError> {
        let played = self.x.clone();
        let loss = log_loss(&played, r)?;
        self.x = soft_bayes_update(&self.x, r.as_slice(), self.eta);
        Ok(LearnerStep { played, loss })
    }
}

/// Uniform grid over the full simplex with spacing `1/k`, N in {2, 3}.
pub fn simplex_grid(assets: usize, resolution: f64) -> Result<Vec<Vec<f64>>, LearnerError> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(LearnerError::InvalidParam(format!("grid resolution must lie in (0, 1], got {resolution}")));
    }
    let k = (1.0 / resolution).round().max(1.0) as usize;
    let h = 1.0 / k as f64;
    match assets {
        2 => Ok((0..=k).map(|i| vec![i as f64 * h, (k - i) as f64 * h]).collect()),
        3 => Ok((0..=k)
            .flat_map(|i| (0..=k - i).map(move |j| vec![i as f64 * h, j as f64 * h, (k - i - j) as f64 * h]))
            .collect()),
        n => Err(LearnerError::Solver(SolverError::UnsupportedDimension(n))),
    }
}

/// Cover's universal portfolio with the uniform prior replaced by grid quadrature.
#[derive(Debug, Clone)]
pub struct UniversalGrid {
    points: Vec<Vec<f64>>,
    log_wealth: Vec<f64>,
}

impl UniversalGrid {
    pub fn new(dims: ProblemDims, resolution: f64) -> Result<Self, LearnerError> {
        let points = simplex_grid(dims.assets(), resolution)?;
        let log_wealth = vec![0.0; points.len()];
        Ok(Self { points, log_wealth })
    }

    pub fn default_resolution(dims: &ProblemDims) -> f64 {
        if dims.assets() == 2 {
            1e-3
        } else {
            1e-2
        }
    }
}

impl OnlineLearner for UniversalGrid {
    fn name(&self) -> &'static str {
        "up-grid"
    }

    fn current(&self) -> Vec<f64> {
        let top = self.log_wealth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n = self.points[0].len();
        let mut x = vec![0.0; n];
        let mut total = 0.0;
        for (p, lw) in self.points.iter().zip(&self.log_wealth) {
            let w = (lw - top).exp();
            total += w;
            for (xi, pi) in x.iter_mut().zip(p) {
                *xi += w * pi;
            }
        }
        x.iter().map(|v| v / total).collect()
    }

    fn step(&mut self, r: &MarketRound) -> Result<LearnerStep, LearnerError> {
        let played = self.current();
        let loss = log_loss(&played, r)?;
        for (p, lw) in self.points.iter().zip(self.log_wealth.iter_mut()) {
            *lw += dot(p, r.as_slice()).ln();
        }
        Ok(LearnerStep { played, loss })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalRun {
    pub plays: Vec<Vec<f64>>,
    pub total_loss: f64,
}

pub fn universal_portfolio_grid(
    rounds: &[MarketRound],
    dims: &ProblemDims,
    resolution: f64,
) -> Result<UniversalRun, LearnerError> {
    let mut up = UniversalGrid::new(*dims, resolution)?;
    let mut plays = Vec::with_capacity(rounds.len());
    let mut total_loss = 0.0;
    for r in rounds {
        let step = up.step(r)?;
        total_loss += step.loss.loss;
        plays.push(step.played);
    }
    Ok(UniversalRun { plays, total_loss })
}

/// `sum_t -ln<u, r_t>`.
pub struct CrpObjective<'a> {
    pub rounds: &'a [MarketRound],
}

impl Objective for CrpObjective<'_> {
    fn value(&self, u: &[f64]) -> f64 {
        let mut v = CompensatedSum::default();
        for r in self.rounds {
            let w = dot(u, r.as_slice());
            if !(w > 0.0) {
                return f64::INFINITY;
            }
            v.add(-w.ln());
        }
        v.value()
    }

    fn gradient(&self, u: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(u.len());
        for r in self.rounds {
            let w = dot(u, r.as_slice());
            for (gi, ri) in g.iter_mut().zip(r.as_slice()) {
                *gi -= ri / w;
            }
        }
        g
    }

    fn hessian(&self, u: &[f64]) -> DMatrix<f64> {
        let n = u.len();
        let mut h = DMatrix::zeros(n, n);
        for r in self.rounds {
            let rs = r.as_slice();
            let w2 = dot(u, rs).powi(2);
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] += rs[i] * rs[j] / w2;
                }
            }
        }
        h
    }
}

/// Best constant-rebalanced portfolio in hindsight over the clipped simplex.
pub fn best_crp(
    rounds: &[MarketRound],
    dims: &ProblemDims,
    solver: &SolverConfig,
) -> Result<(PortfolioState, f64), LearnerError> {
    if rounds.is_empty() {
        return Err(LearnerError::InvalidParam("best CRP needs at least one round".into()));
    }
    let solution = minimize_over_clipped_simplex(&CrpObjective { rounds }, &dims.uniform(), dims, solver)?;
    let loss = crp_loss(solution.x.as_slice(), rounds);
    Ok((solution.x, loss))
}
