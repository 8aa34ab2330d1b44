//! JSON trace schema for one experiment run.

use serde::{Deserialize, Serialize};

use crate::domain::{MarketRound, ProblemDims};
use crate::markets::MarketSpec;
use crate::solver::SolverConfig;

use super::LearnerKind;

pub const SCHEMA_VERSION: u32 = 1;

/// Learner parameters after defaults were filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLearner {
    pub kind: LearnerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_resolution: Option<f64>,
}

impl ResolvedLearner {
    /// Whether the learner's plays must lie in the clipped simplex.
    pub fn clipped(&self) -> bool {
        matches!(self.kind, LearnerKind::Ada | LearnerKind::Barrons | LearnerKind::Ons)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketInfo {
    /// Generator name, or `csv`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<MarketSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub rounds: Vec<MarketRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub global_round: usize,
    pub epoch_index: usize,
    pub epoch_round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub x: Vec<f64>,
    pub loss: f64,
    pub cumulative_loss: f64,
    pub grad_inf_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Regularized leader after this round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader: Option<Vec<f64>>,
    /// `max_i |x_{t,i}/x_{t-1,i} - 1|` against the previous play of the same epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ratio_dev: Option<f64>,
    /// `max_i |u_{t,i}/u_{t-1,i} - 1|` against the previous leader of the same epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_ratio_dev: Option<f64>,
    pub restart: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    pub check: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    SolverFailure,
    InvariantAbort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: RunStatus,
    pub rounds_completed: usize,
    pub total_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_crp: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_crp_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regret: Option<f64>,
    /// `-ln(W_learner / W_crp)` from running products of per-round wealth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regret_multiplicative: Option<f64>,
    pub epoch_count: usize,
    pub restarts: usize,
    pub max_grad_inf_norm: f64,
    pub invariant_violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wall-clock data; kept apart so the rest of the trace is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub created_unix_ms: u128,
    pub wall_ms: f64,
    pub per_round_us: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub learner: ResolvedLearner,
    pub dims: ProblemDims,
    pub solver: SolverConfig,
    pub market: MarketInfo,
    pub per_round: Vec<RoundRecord>,
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<RunMetadata>,
}

impl ExperimentResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn without_metadata(mut self) -> Self {
        self.metadata = None;
        self
    }
}

/// Running product of per-round wealth with an explicit binary exponent, so
/// long horizons neither underflow nor round through logarithms.
#[derive(Debug, Clone, Copy)]
pub struct WealthProduct {
    mantissa: f64,
    exponent: i64,
}

impl Default for WealthProduct {
    fn default() -> Self {
        Self { mantissa: 1.0, exponent: 0 }
    }
}

impl WealthProduct {
    const CHUNK: i32 = 512;

    pub fn mul(&mut self, w: f64) {
        self.mantissa *= w;
        let big = 2f64.powi(Self::CHUNK);
        while self.mantissa != 0.0 && self.mantissa < 1.0 / big {
            self.mantissa *= big;
            self.exponent -= Self::CHUNK as i64;
        }
        while self.mantissa > big {
            self.mantissa /= big;
            self.exponent += Self::CHUNK as i64;
        }
    }

    pub fn ln(&self) -> f64 {
        self.mantissa.ln() + self.exponent as f64 * std::f64::consts::LN_2
    }
}
