//! Regret-growth sweeps over horizons and seeds.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::ProblemDims;
use crate::markets::{MarketKind, MarketSpec};
use crate::solver::SolverConfig;

use super::{run_experiment, LearnerConfig, Market, RunError, RunOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub learner: LearnerConfig,
    pub market: MarketKind,
    pub assets: usize,
    pub horizons: Vec<usize>,
    pub repetitions: usize,
    pub base_seed: u64,
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub learner: String,
    pub market: String,
    #[serde(rename = "N")]
    pub assets: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    pub regret: f64,
    pub epochs: usize,
    #[serde(rename = "G")]
    pub max_grad_inf_norm: f64,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub runs: usize,
    pub mean_regret: f64,
    pub max_regret: f64,
    /// `max_regret(T) / max_regret(T_prev)` against the previous horizon.
    pub growth_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
    pub aggregates: Vec<SweepAggregate>,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep report serializes")
    }
}

/// Run every (T, repetition) pair sequentially; seeds are `base_seed + rep`.
/// Failed runs are reported and skipped rather than aborting the sweep.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepReport, RunError> {
    if cfg.horizons.is_empty() {
        return Err(RunError::Validation("the horizon list is empty".into()));
    }
    if cfg.repetitions == 0 {
        return Err(RunError::Validation("repetitions must be at least 1".into()));
    }
    if cfg.market == MarketKind::Csv {
        return Err(RunError::Validation("sweeps need a synthetic market".into()));
    }
    let kind = cfg.learner.kind.unwrap_or(super::LearnerKind::Ada);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut aggregates: Vec<SweepAggregate> = Vec::new();

    for &t in &cfg.horizons {
        let dims = ProblemDims::new(cfg.assets, t).map_err(|e| RunError::Validation(e.to_string()))?;
        let mut regrets = Vec::new();
        for rep in 0..cfg.repetitions {
            let seed = cfg.base_seed + rep as u64;
            let spec = MarketSpec { epsilon: cfg.epsilon, sigma: cfg.sigma, ..MarketSpec::new(cfg.market, dims, seed) };
            let market = Market::from_spec(&spec).map_err(|e| RunError::Validation(e.to_string()))?;
            let started = Instant::now();
            match run_experiment(&cfg.learner, &market, &cfg.solver, RunOptions::default()) {
                Ok(res) => {
                    let regret = res.summary.regret.unwrap_or(f64::NAN);
                    regrets.push(regret);
                    rows.push(SweepRow {
                        learner: kind.name().to_string(),
                        market: cfg.market.name().to_string(),
                        assets: cfg.assets,
                        horizon: t,
                        seed,
                        regret,
                        epochs: res.summary.epoch_count,
                        max_grad_inf_norm: res.summary.max_grad_inf_norm,
                        runtime_ms: started.elapsed().as_secs_f64() * 1e3,
                    });
                }
                Err(RunError::Validation(m)) => return Err(RunError::Validation(m)),
                Err(e) => failures.push(SweepFailure { horizon: t, seed, error: e.to_string() }),
            }
        }
        if regrets.is_empty() {
            continue;
        }
        let mean = regrets.iter().sum::<f64>() / regrets.len() as f64;
        let max = regrets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let growth_ratio = aggregates.last().map(|prev| max / prev.max_regret);
        aggregates.push(SweepAggregate { horizon: t, runs: regrets.len(), mean_regret: mean, max_regret: max, growth_ratio });
    }
    Ok(SweepReport { config: cfg.clone(), rows, failures, aggregates })
}
