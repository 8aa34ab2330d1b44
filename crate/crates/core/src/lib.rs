//! Online portfolio selection with adaptive log-barrier mirror descent.
//!
//! The main learner is [`AdaState`]: BARRONS steps (a mixed quadratic and
//! log-barrier regularizer with per-coordinate learning rates that only grow)
//! wrapped in a restart scheme that halves `beta` whenever the regularized
//! leader shows the current value is too large. Baselines, market generators
//! and an experiment harness are included for comparison.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ada;
pub mod barrons;
pub mod baselines;
pub mod domain;
pub mod harness;
pub mod markets;
pub mod solver;

pub use ada::{AdaConfig, AdaError, AdaState, AdaStep};
pub use barrons::{BarronsError, BarronsState, BarronsStep};
pub use baselines::{best_crp, Eg, LearnerError, Ogd, OnlineLearner, Ons, SoftBayes, UniversalGrid};
pub use domain::{DomainError, LossRecord, MarketRound, PortfolioState, ProblemDims};
pub use harness::{
    run_experiment, sweep, verify, ExperimentResult, LearnerConfig, LearnerKind, Market, RunError, RunOptions,
    SweepConfig, SweepReport, VerifyReport,
};
pub use markets::{MarketKind, MarketSpec};
pub use solver::{minimize_over_clipped_simplex, Objective, SolverConfig, SolverError};
