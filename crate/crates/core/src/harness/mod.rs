//! Experiment runner: drives a learner over a market, tracks regret against
//! the best constant-rebalanced portfolio, checks runtime invariants and
//! produces a serializable trace.

mod sweep;
mod trace;
mod verify;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ada::{default_eta, epoch_bound, ratio_deviation, AdaConfig, AdaError, AdaState, STABILITY_SLACK};
use crate::barrons::{BarronsError, BarronsState};
use crate::baselines::{best_crp, Eg, LearnerError, Ogd, OnlineLearner, Ons, SoftBayes, UniversalGrid};
use crate::domain::{check_clipped, check_simplex, dot, LossRecord, MarketRound, ProblemDims};
use crate::markets::{generate, load_csv, MarketError, MarketSpec};
use crate::solver::{SolverConfig, SolverError};

pub use sweep::{sweep, SweepAggregate, SweepConfig, SweepFailure, SweepReport, SweepRow};
pub use trace::{
    ExperimentResult, MarketInfo, ResolvedLearner, RoundRecord, RunMetadata, RunStatus, Summary, Violation,
    WealthProduct, SCHEMA_VERSION,
};
pub use verify::{verify, verify_file, CheckFailure, VerifyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LearnerKind {
    #[serde(rename = "ada")]
    Ada,
    #[serde(rename = "barrons")]
    Barrons,
    #[serde(rename = "ons")]
    Ons,
    #[serde(rename = "eg")]
    Eg,
    #[serde(rename = "ogd")]
    Ogd,
    #[serde(rename = "softbayes")]
    SoftBayes,
    #[serde(rename = "up-grid")]
    UpGrid,
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Ada => "ada",
            LearnerKind::Barrons => "barrons",
            LearnerKind::Ons => "ons",
            LearnerKind::Eg => "eg",
            LearnerKind::Ogd => "ogd",
            LearnerKind::SoftBayes => "softbayes",
            LearnerKind::UpGrid => "up-grid",
        }
    }
}

/// Learner choice plus optional overrides; unset parameters take defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub kind: Option<LearnerKind>,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub mix: Option<f64>,
    pub grid_resolution: Option<f64>,
}

impl LearnerConfig {
    pub fn new(kind: LearnerKind) -> Self {
        Self { kind: Some(kind), ..Self::default() }
    }

    pub fn resolve(&self, dims: &ProblemDims) -> ResolvedLearner {
        let kind = self.kind.unwrap_or(LearnerKind::Ada);
        let mut r = ResolvedLearner { kind, beta: None, eta: None, gamma: None, mix: None, grid_resolution: None };
        match kind {
            LearnerKind::Ada => {
                let d = AdaConfig::defaults(dims);
                r.beta = Some(self.beta.unwrap_or(d.beta_init));
                r.eta = Some(self.eta.unwrap_or(d.eta_base));
                r.gamma = Some(self.gamma.unwrap_or(d.gamma));
            }
            LearnerKind::Barrons => {
                r.beta = Some(self.beta.unwrap_or(0.5));
                r.eta = Some(self.eta.unwrap_or_else(|| default_eta(dims)));
            }
            LearnerKind::Ons => {
                r.beta = Some(self.beta.unwrap_or(0.5));
                r.mix = Some(self.mix.unwrap_or(0.0));
            }
            LearnerKind::Eg => {
                r.eta = Some(self.eta.unwrap_or_else(|| Eg::default_eta(dims, 1.0)));
                r.mix = Some(self.mix.unwrap_or(0.0));
            }
            LearnerKind::Ogd => r.eta = Some(self.eta.unwrap_or_else(|| Ogd::default_eta(dims))),
            LearnerKind::SoftBayes => r.eta = Some(self.eta.unwrap_or_else(|| SoftBayes::default_eta(dims))),
            LearnerKind::UpGrid => {
                r.grid_resolution = Some(self.grid_resolution.unwrap_or_else(|| UniversalGrid::default_resolution(dims)))
            }
        }
        r
    }
}

/// A market sequence together with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub dims: ProblemDims,
    pub info: MarketInfo,
}

impl Market {
    pub fn from_spec(spec: &MarketSpec) -> Result<Self, MarketError> {
        let rounds = generate(spec)?;
        Ok(Self {
            dims: spec.dims,
            info: MarketInfo { kind: spec.kind.name().to_string(), spec: Some(spec.clone()), path: None, rounds },
        })
    }

    pub fn from_csv(path: &Path, assets: usize) -> Result<Self, MarketError> {
        let rounds = load_csv(path, assets)?;
        let dims = ProblemDims::new(assets, rounds.len())?;
        Ok(Self {
            dims,
            info: MarketInfo { kind: "csv".into(), spec: None, path: Some(path.display().to_string()), rounds },
        })
    }

    pub fn rounds(&self) -> &[MarketRound] {
        &self.info.rounds
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("solver failure: {message}")]
    Solver { message: String, partial: Box<ExperimentResult> },
    #[error("invariant violation: {message}")]
    Invariant { message: String, partial: Box<ExperimentResult> },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 1,
            RunError::Solver { .. } => 2,
            RunError::Invariant { .. } => 3,
        }
    }

    pub fn partial(&self) -> Option<&ExperimentResult> {
        match self {
            RunError::Validation(_) => None,
            RunError::Solver { partial, .. } | RunError::Invariant { partial, .. } => Some(partial),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Abort on the first invariant violation instead of recording it.
    pub strict: bool,
}

struct Outcome {
    played: Vec<f64>,
    loss: LossRecord,
    epoch_index: usize,
    epoch_round: usize,
    beta: Option<f64>,
    alpha: Option<f64>,
    leader: Option<Vec<f64>>,
    u_ratio_dev: Option<f64>,
    restart: bool,
    violations: Vec<String>,
}

enum StepFailure {
    Solver(String),
    Invariant(String),
    Other(String),
}

impl From<SolverError> for StepFailure {
    fn from(e: SolverError) -> Self {
        StepFailure::Solver(e.to_string())
    }
}

impl From<LearnerError> for StepFailure {
    fn from(e: LearnerError) -> Self {
        match e {
            LearnerError::Solver(s) => s.into(),
            other => StepFailure::Other(other.to_string()),
        }
    }
}

impl From<BarronsError> for StepFailure {
    fn from(e: BarronsError) -> Self {
        match e {
            BarronsError::Solver(s) => StepFailure::Solver(format!("OMD step: {s}")),
            other => StepFailure::Other(other.to_string()),
        }
    }
}

impl From<AdaError> for StepFailure {
    fn from(e: AdaError) -> Self {
        match e {
            AdaError::Leader(s) => StepFailure::Solver(format!("regularized leader: {s}")),
            AdaError::Barrons(b) => b.into(),
            e @ AdaError::EpochBound { .. } => StepFailure::Invariant(e.to_string()),
            other => StepFailure::Other(other.to_string()),
        }
    }
}

enum Engine {
    Ada(AdaState),
    Barrons(BarronsState),
    Baseline(Box<dyn OnlineLearner>),
}

impl Engine {
    fn build(learner: &ResolvedLearner, dims: ProblemDims, solver: &SolverConfig) -> Result<Self, String> {
        let e = |x: &dyn std::fmt::Display| x.to_string();
        Ok(match learner.kind {
            LearnerKind::Ada => {
                let cfg = AdaConfig {
                    beta_init: learner.beta.unwrap_or(0.5),
                    eta_base: learner.eta.unwrap_or_else(|| default_eta(&dims)),
                    gamma: learner.gamma.unwrap_or(1.0 / 25.0),
                };
                Engine::Ada(AdaState::new(dims, cfg).map_err(|x| e(&x))?)
            }
            LearnerKind::Barrons => Engine::Barrons(
                BarronsState::new(dims, learner.beta.unwrap_or(0.5), learner.eta.unwrap_or_else(|| default_eta(&dims)))
                    .map_err(|x| e(&x))?,
            ),
            LearnerKind::Ons => Engine::Baseline(Box::new(
                Ons::new(dims, learner.beta.unwrap_or(0.5), learner.mix.unwrap_or(0.0), *solver).map_err(|x| e(&x))?,
            )),
            LearnerKind::Eg => Engine::Baseline(Box::new(
                Eg::new(dims, learner.eta.unwrap_or(0.0), learner.mix.unwrap_or(0.0)).map_err(|x| e(&x))?,
            )),
            LearnerKind::Ogd => {
                Engine::Baseline(Box::new(Ogd::new(dims, learner.eta.unwrap_or(0.0)).map_err(|x| e(&x))?))
            }
            LearnerKind::SoftBayes => {
                Engine::Baseline(Box::new(SoftBayes::new(dims, learner.eta.unwrap_or(0.0)).map_err(|x| e(&x))?))
            }
            LearnerKind::UpGrid => Engine::Baseline(Box::new(
                UniversalGrid::new(dims, learner.grid_resolution.unwrap_or(1e-2)).map_err(|x| e(&x))?,
            )),
        })
    }

    fn step(&mut self, r: &MarketRound, solver: &SolverConfig) -> Result<Outcome, StepFailure> {
        match self {
            Engine::Ada(state) => {
                let s = state.step(r, solver)?;
                Ok(Outcome {
                    played: s.played.into_inner(),
                    loss: s.loss,
                    epoch_index: s.epoch_index,
                    epoch_round: s.epoch_round,
                    beta: Some(s.beta),
                    alpha: Some(s.alpha),
                    leader: Some(s.leader.into_inner()),
                    u_ratio_dev: s.leader_ratio_dev,
                    restart: s.restart,
                    violations: s.violations,
                })
            }
            Engine::Barrons(state) => {
                let epoch_round = state.round();
                let s = state.step(r, solver)?;
                Ok(Outcome {
                    played: s.played.into_inner(),
                    loss: s.loss,
                    epoch_index: 1,
                    epoch_round,
                    beta: Some(state.beta()),
                    alpha: None,
                    leader: None,
                    u_ratio_dev: None,
                    restart: false,
                    violations: Vec::new(),
                })
            }
            Engine::Baseline(learner) => {
                let s = learner.step(r)?;
                Ok(Outcome {
                    played: s.played,
                    loss: s.loss,
                    epoch_index: 1,
                    epoch_round: 0,
                    beta: None,
                    alpha: None,
                    leader: None,
                    u_ratio_dev: None,
                    restart: false,
                    violations: Vec::new(),
                })
            }
        }
    }
}

/// Bound on `max_i |x_{t+1,i}/x_{t,i} - 1|` for the BARRONS family, when it applies.
pub(crate) fn iterate_stability_bound(learner: &ResolvedLearner) -> Option<f64> {
    match learner.kind {
        LearnerKind::Ada | LearnerKind::Barrons => {
            let eta = learner.eta?;
            (eta <= 1.0 / 300.0).then(|| (3.0 * eta).sqrt() / 2.0 + STABILITY_SLACK)
        }
        _ => None,
    }
}

pub(crate) fn leader_stability_bound(learner: &ResolvedLearner) -> Option<f64> {
    match learner.kind {
        LearnerKind::Ada => {
            let gamma = learner.gamma?;
            (gamma <= 1.0 / 25.0).then(|| gamma.sqrt() / 2.0 + STABILITY_SLACK)
        }
        _ => None,
    }
}

/// Run one learner over one market and build its trace.
pub fn run_experiment(
    learner: &LearnerConfig,
    market: &Market,
    solver: &SolverConfig,
    opts: RunOptions,
) -> Result<ExperimentResult, RunError> {
    solver.validate().map_err(|e| RunError::Validation(e.to_string()))?;
    let dims = market.dims;
    let rounds = market.rounds();
    if rounds.len() != dims.horizon() {
        return Err(RunError::Validation(format!(
            "market has {} rounds but the horizon is {}",
            rounds.len(),
            dims.horizon()
        )));
    }
    if let Some(r) = rounds.iter().find(|r| r.len() != dims.assets()) {
        return Err(RunError::Validation(format!("round with {} assets, expected {}", r.len(), dims.assets())));
    }
    let resolved = learner.resolve(&dims);
    let mut engine = Engine::build(&resolved, dims, solver).map_err(RunError::Validation)?;

    let started = Instant::now();
    let created_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let x_bound = iterate_stability_bound(&resolved);
    let u_bound = leader_stability_bound(&resolved);
    let max_epochs = epoch_bound(&dims);

    let mut per_round: Vec<RoundRecord> = Vec::with_capacity(rounds.len());
    let mut per_round_us = Vec::with_capacity(rounds.len());
    let mut violations: Vec<Violation> = Vec::new();
    let mut cumulative = 0.0;
    let mut max_grad: f64 = 0.0;
    let mut failure: Option<(RunStatus, String)> = None;

    for (k, r) in rounds.iter().enumerate() {
        let global_round = k + 1;
        let tick = Instant::now();
        let out = match engine.step(r, solver) {
            Ok(o) => o,
            Err(StepFailure::Solver(m)) => {
                failure = Some((RunStatus::SolverFailure, format!("round {global_round}: {m}")));
                break;
            }
            Err(StepFailure::Invariant(m)) => {
                failure = Some((RunStatus::InvariantAbort, format!("round {global_round}: {m}")));
                break;
            }
            Err(StepFailure::Other(m)) => return Err(RunError::Validation(format!("round {global_round}: {m}"))),
        };
        per_round_us.push(tick.elapsed().as_micros() as u64);

        let mut round_violations: Vec<(String, String)> =
            out.violations.into_iter().map(|d| ("learner".to_string(), d)).collect();
        let membership = if resolved.clipped() { check_clipped(&out.played, &dims) } else { check_simplex(&out.played) };
        if let Err(e) = membership {
            round_violations.push(("simplex".into(), e.to_string()));
        }
        let prev_same_epoch = per_round
            .last()
            .filter(|p| x_bound.is_some() && p.epoch_index == out.epoch_index && out.epoch_round > 1);
        let x_ratio_dev = prev_same_epoch.map(|p| ratio_deviation(&out.played, &p.x));
        if let (Some(dev), Some(bound)) = (x_ratio_dev, x_bound) {
            if dev > bound {
                round_violations.push(("iterate_stability".into(), format!("deviation {dev:e} exceeds {bound:e}")));
            }
        }
        if let (Some(dev), Some(bound)) = (out.u_ratio_dev, u_bound) {
            if dev > bound {
                round_violations.push(("leader_stability".into(), format!("deviation {dev:e} exceeds {bound:e}")));
            }
        }
        if out.epoch_index > max_epochs {
            round_violations.push(("epoch_bound".into(), format!("epoch {} exceeds {max_epochs}", out.epoch_index)));
        }

        cumulative += out.loss.loss;
        let grad_inf = out.loss.grad_inf_norm();
        max_grad = max_grad.max(grad_inf);
        per_round.push(RoundRecord {
            global_round,
            epoch_index: out.epoch_index,
            epoch_round: out.epoch_round,
            beta: out.beta,
            x: out.played,
            loss: out.loss.loss,
            cumulative_loss: cumulative,
            grad_inf_norm: grad_inf,
            alpha: out.alpha,
            leader: out.leader,
            x_ratio_dev,
            u_ratio_dev: out.u_ratio_dev,
            restart: out.restart,
        });

        for (check, detail) in round_violations {
            violations.push(Violation { round: Some(global_round), check, detail });
        }
        if opts.strict && !violations.is_empty() {
            let v = &violations[0];
            failure = Some((RunStatus::InvariantAbort, format!("round {global_round}: {}: {}", v.check, v.detail)));
            break;
        }
    }

    let epoch_count = per_round.iter().map(|p| p.epoch_index).max().unwrap_or(1);
    let restarts = per_round.iter().filter(|p| p.restart).count();
    let mut summary = Summary {
        status: RunStatus::Complete,
        rounds_completed: per_round.len(),
        total_loss: cumulative,
        best_crp: None,
        best_crp_loss: None,
        regret: None,
        regret_multiplicative: None,
        epoch_count,
        restarts,
        max_grad_inf_norm: max_grad,
        invariant_violations: violations,
        error: None,
    };

    if failure.is_none() {
        match best_crp(rounds, &dims, solver) {
            Ok((u, loss)) => {
                let mut learner_wealth = WealthProduct::default();
                let mut crp_wealth = WealthProduct::default();
                for (rec, r) in per_round.iter().zip(rounds) {
                    learner_wealth.mul(dot(&rec.x, r.as_slice()));
                    crp_wealth.mul(dot(u.as_slice(), r.as_slice()));
                }
                summary.regret = Some(cumulative - loss);
                summary.regret_multiplicative = Some(-(learner_wealth.ln() - crp_wealth.ln()));
                summary.best_crp = Some(u.into_inner());
                summary.best_crp_loss = Some(loss);
            }
            Err(e) => failure = Some((RunStatus::SolverFailure, format!("best CRP: {e}"))),
        }
    }

    let mut result = ExperimentResult {
        schema_version: SCHEMA_VERSION,
        learner: resolved,
        dims,
        solver: *solver,
        market: market.info.clone(),
        per_round,
        summary,
        metadata: Some(RunMetadata {
            created_unix_ms,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            per_round_us,
        }),
    };

    match failure {
        None => Ok(result),
        Some((status, message)) => {
            result.summary.status = status;
            result.summary.error = Some(message.clone());
            let partial = Box::new(result);
            Err(match status {
                RunStatus::SolverFailure => RunError::Solver { message, partial },
                _ => RunError::Invariant { message, partial },
            })
        }
    }
}
