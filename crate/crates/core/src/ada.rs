//! Ada-BARRONS: BARRONS with `beta` tuned online by restarts.
//!
//! After every round the controller computes the regularized leader
//! `u_t = argmin sum_s f_s(u) + (1/gamma) sum_i ln(1/u_i)` over the current
//! epoch and the admissible ceiling
//! `alpha_t(u) = min(1/2, min_s 1/(8 |<u - x_s, grad_s>|))`.
//! When `beta > alpha_t(u_t)`, `beta` halves and BARRONS restarts from the
//! uniform portfolio with all epoch data discarded. The horizon `T` used by
//! `eta`, the clipped simplex and the schedule's logarithm stays global.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrons::{BarronsError, BarronsState, HistoryEntry};
use crate::domain::{dot, CompensatedSum, LossRecord, MarketRound, PortfolioState, ProblemDims};
use crate::solver::{minimize_over_clipped_simplex, Objective, SolverConfig, SolverError};

/// Slack on the ratio-stability bounds, absorbing solver tolerance.
pub const STABILITY_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaError {
    #[error("beta_init must lie in (0, 1/2], got {0}")]
    InvalidBeta(f64),
    #[error("eta must lie in (0, 1/300], got {0}")]
    InvalidEta(f64),
    #[error("gamma must lie in (0, 1/25], got {0}")]
    InvalidGamma(f64),
    #[error(transparent)]
    Barrons(#[from] BarronsError),
    #[error("regularized leader: {0}")]
    Leader(#[source] SolverError),
    #[error("epoch {epoch} exceeds the bound {bound}; restarts should have stopped")]
    EpochBound { epoch: usize, bound: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaConfig {
    pub beta_init: f64,
    pub eta_base: f64,
    pub gamma: f64,
}

impl AdaConfig {
    /// `beta = 1/2`, `eta = 1/(2048 N (ln T)^2)`, `gamma = 1/25`.
    pub fn defaults(dims: &ProblemDims) -> Self {
        Self {
            beta_init: 0.5,
            eta_base: default_eta(dims),
            gamma: 1.0 / 25.0,
        }
    }

    pub fn validate(&self) -> Result<(), AdaError> {
        if !(self.beta_init > 0.0 && self.beta_init <= 0.5) {
            return Err(AdaError::InvalidBeta(self.beta_init));
        }
        if !(self.eta_base > 0.0 && self.eta_base <= 1.0 / 300.0) {
            return Err(AdaError::InvalidEta(self.eta_base));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0 / 25.0) {
            return Err(AdaError::InvalidGamma(self.gamma));
        }
        Ok(())
    }
}

pub fn default_eta(dims: &ProblemDims) -> f64 {
    1.0 / (2048.0 * dims.assets() as f64 * dims.ln_horizon().powi(2))
}

/// `ceil(log2(32 N T)) + 1`.
pub fn epoch_bound(dims: &ProblemDims) -> usize {
    let nt = (dims.assets() * dims.horizon()) as f64;
    (32.0 * nt).log2().ceil() as usize + 1
}

/// Lower end of the range of `alpha_t(u)` on the clipped simplex, `1/(16 N T)`.
pub fn alpha_floor(dims: &ProblemDims) -> f64 {
    1.0 / (16.0 * (dims.assets() * dims.horizon()) as f64)
}

/// `sum_s -ln<u, r_s> + (1/gamma) sum_i ln(1/u_i)`.
pub struct LeaderObjective<'a> {
    pub rounds: &'a [MarketRound],
    pub inv_gamma: f64,
}

impl Objective for LeaderObjective<'_> {
    fn value(&self, u: &[f64]) -> f64 {
        let mut v = CompensatedSum::default();
        for &ui in u {
            if !(ui > 0.0) {
                return f64::INFINITY;
            }
            v.add(-self.inv_gamma * ui.ln());
        }
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
        let mut g = DVector::from_iterator(u.len(), u.iter().map(|ui| -self.inv_gamma / ui));
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
        let mut h = DMatrix::from_diagonal(&DVector::from_iterator(n, u.iter().map(|ui| self.inv_gamma / (ui * ui))));
        for r in self.rounds {
            let rs = r.as_slice();
            let w2 = dot(u, rs).powi(2);
            for i in 0..n {
                if rs[i] == 0.0 {
                    continue;
                }
                let ri = rs[i] / w2;
                for j in 0..n {
                    h[(i, j)] += ri * rs[j];
                }
            }
        }
        h
    }
}

/// The log-barrier-regularized leader over `rounds`.
pub fn regularized_leader(
    rounds: &[MarketRound],
    gamma: f64,
    warm_start: &[f64],
    dims: &ProblemDims,
    solver: &SolverConfig,
) -> Result<PortfolioState, SolverError> {
    let objective = LeaderObjective { rounds, inv_gamma: 1.0 / gamma };
    Ok(minimize_over_clipped_simplex(&objective, warm_start, dims, solver)?.x)
}

/// `min(1/2, min_s 1/(8 |<u - x_s, grad_s>|))`; exact zeros contribute nothing.
pub fn alpha(u: &[f64], history: &[HistoryEntry]) -> f64 {
    let mut worst = 0.0_f64;
    for h in history {
        let inner: f64 = u.iter().zip(&h.x).zip(&h.gradient).map(|((ui, xi), gi)| (ui - xi) * gi).sum();
        worst = worst.max(inner.abs());
    }
    if worst == 0.0 {
        0.5
    } else {
        (1.0 / (8.0 * worst)).min(0.5)
    }
}

/// `a = max_{s, i} u_i / x_{s,i}` over the given history.
pub fn ratio_max(u: &[f64], history: &[HistoryEntry]) -> f64 {
    history
        .iter()
        .flat_map(|h| u.iter().zip(&h.x).map(|(ui, xi)| ui / xi))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest `|new_i / old_i - 1|`.
pub fn ratio_deviation(new: &[f64], old: &[f64]) -> f64 {
    new.iter().zip(old).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max)
}

/// `a_{t-1}` and `a_t` at a restart, which must satisfy `a_{t-1} >= a_t / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioMaxCheck {
    pub previous: f64,
    pub current: f64,
}

impl RatioMaxCheck {
    pub fn holds(&self) -> bool {
        self.previous >= 0.5 * self.current * (1.0 - 1e-12)
    }
}

#[derive(Debug, Clone)]
pub struct AdaStep {
    pub played: PortfolioState,
    pub loss: LossRecord,
    /// Parameters of the epoch the round was played in.
    pub beta: f64,
    pub epoch_index: usize,
    pub epoch_round: usize,
    pub leader: PortfolioState,
    pub alpha: f64,
    pub restart: bool,
    /// Portfolio for the next round (uniform after a restart).
    pub next: PortfolioState,
    /// `max_i |u_{t,i}/u_{t-1,i} - 1|` when `u_{t-1}` belongs to the same epoch.
    pub leader_ratio_dev: Option<f64>,
    /// `max_i |x_{t+1,i}/x_{t,i} - 1|` unless this round restarted.
    pub iterate_ratio_dev: Option<f64>,
    pub ratio_max: Option<RatioMaxCheck>,
    /// Runtime invariant checks that failed this round.
    pub violations: Vec<String>,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct AdaState {
    dims: ProblemDims,
    cfg: AdaConfig,
    inner: BarronsState,
    beta: f64,
    epoch_index: usize,
    epoch_rounds: Vec<MarketRound>,
    leader: Option<PortfolioState>,
    prev_alpha: Option<f64>,
    global_round: usize,
}

impl AdaState {
    pub fn new(dims: ProblemDims, cfg: AdaConfig) -> Result<Self, AdaError> {
        cfg.validate()?;
        Ok(Self {
            dims,
            cfg,
            inner: BarronsState::new(dims, cfg.beta_init, cfg.eta_base)?,
            beta: cfg.beta_init,
            epoch_index: 1,
            epoch_rounds: Vec::new(),
            leader: None,
            prev_alpha: None,
            global_round: 0,
        })
    }

    pub fn config(&self) -> &AdaConfig {
        &self.cfg
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn epoch_index(&self) -> usize {
        self.epoch_index
    }

    pub fn inner(&self) -> &BarronsState {
        &self.inner
    }

    pub fn leader(&self) -> Option<&PortfolioState> {
        self.leader.as_ref()
    }

    pub fn global_round(&self) -> usize {
        self.global_round
    }

    pub fn current(&self) -> &PortfolioState {
        self.inner.current()
    }

    pub fn step(&mut self, r: &MarketRound, solver: &SolverConfig) -> Result<AdaStep, AdaError> {
        let beta = self.beta;
        let epoch_index = self.epoch_index;
        let epoch_round = self.inner.round();

        let mut rounds = self.epoch_rounds.clone();
        rounds.push(r.clone());
        let warm = self.leader.as_ref().map_or_else(|| self.dims.uniform(), |u| u.as_slice().to_vec());
        let leader = regularized_leader(&rounds, self.cfg.gamma, &warm, &self.dims, solver).map_err(AdaError::Leader)?;

        let step = self.inner.step(r, solver)?;
        let history = self.inner.history();
        let alpha_t = alpha(leader.as_slice(), history);
        let restart = beta > alpha_t;

        let mut violations = Vec::new();
        if !(alpha_t >= alpha_floor(&self.dims) && alpha_t <= 0.5) {
            violations.push(format!("alpha {alpha_t:e} outside [1/(16NT), 1/2]"));
        }
        let leader_ratio_dev = self.leader.as_ref().map(|prev| ratio_deviation(leader.as_slice(), prev.as_slice()));
        if let Some(dev) = leader_ratio_dev {
            let bound = self.cfg.gamma.sqrt() / 2.0 + STABILITY_SLACK;
            if dev > bound {
                violations.push(format!("leader ratio deviation {dev:e} exceeds {bound:e}"));
            }
        }
        let iterate_ratio_dev = (!restart).then(|| ratio_deviation(step.next.as_slice(), step.played.as_slice()));
        if let Some(dev) = iterate_ratio_dev {
            let bound = (3.0 * self.cfg.eta_base).sqrt() / 2.0 + STABILITY_SLACK;
            if dev > bound {
                violations.push(format!("iterate ratio deviation {dev:e} exceeds {bound:e}"));
            }
        }

        let mut ratio_check = None;
        if restart {
            if let Some(prev_alpha) = self.prev_alpha {
                if beta > prev_alpha {
                    violations.push(format!("restart at beta {beta} but beta > previous alpha {prev_alpha}"));
                }
            }
            if let Some(prev_leader) = &self.leader {
                let check = RatioMaxCheck {
                    previous: ratio_max(prev_leader.as_slice(), &history[..history.len() - 1]),
                    current: ratio_max(leader.as_slice(), history),
                };
                if !check.holds() {
                    violations.push(format!(
                        "ratio max {:e} fell below half of {:e} at restart",
                        check.previous, check.current
                    ));
                }
                ratio_check = Some(check);
            }
        }

        let next = if restart {
            let bound = epoch_bound(&self.dims);
            if self.epoch_index + 1 > bound {
                return Err(AdaError::EpochBound { epoch: self.epoch_index + 1, bound });
            }
            self.beta = beta / 2.0;
            self.epoch_index += 1;
            self.inner = BarronsState::new(self.dims, self.beta, self.cfg.eta_base)?;
            self.epoch_rounds.clear();
            self.leader = None;
            self.prev_alpha = None;
            self.inner.current().clone()
        } else {
            self.epoch_rounds = rounds;
            self.leader = Some(leader.clone());
            self.prev_alpha = Some(alpha_t);
            step.next.clone()
        };
        self.global_round += 1;

        Ok(AdaStep {
            played: step.played,
            loss: step.loss,
            beta,
            epoch_index,
            epoch_round,
            leader,
            alpha: alpha_t,
            restart,
            next,
            leader_ratio_dev,
            iterate_ratio_dev,
            ratio_max: ratio_check,
            violations,
            newton_iterations: step.newton_iterations,
        })
    }
}
