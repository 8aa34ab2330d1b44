//! Offline re-check of a saved trace: every recorded quantity that can be
//! recomputed from the market and the plays is recomputed and compared.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::ada::{alpha, alpha_floor, epoch_bound, ratio_deviation, ratio_max, RatioMaxCheck};
use crate::barrons::HistoryEntry;
use crate::baselines::best_crp;
use crate::domain::{check_clipped, check_simplex, crp_loss, dot, log_loss};

use super::{iterate_stability_bound, leader_stability_bound, ExperimentResult, LearnerKind, RunStatus, WealthProduct};

const REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckFailure {
    pub check: &'static str,
    pub round: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks_run: usize,
    pub failures: Vec<CheckFailure>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn check(&mut self, ok: bool, check: &'static str, round: Option<usize>, detail: impl FnOnce() -> String) {
        self.checks_run += 1;
        if !ok {
            self.failures.push(CheckFailure { check, round, detail: detail() });
        }
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed trace: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn verify_file(path: &Path) -> Result<VerifyReport, VerifyError> {
    let text = std::fs::read_to_string(path)?;
    let trace = ExperimentResult::from_json(&text)?;
    Ok(verify(&trace))
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

pub fn verify(trace: &ExperimentResult) -> VerifyReport {
    let mut rep = VerifyReport::default();
    let dims = trace.dims;
    let rounds = &trace.market.rounds;
    let recs = &trace.per_round;
    let summary = &trace.summary;
    let is_ada = trace.learner.kind == LearnerKind::Ada;

    rep.check(rounds.len() == dims.horizon(), "market_length", None, || {
        format!("{} rounds for horizon {}", rounds.len(), dims.horizon())
    });
    rep.check(recs.len() <= rounds.len() && recs.len() == summary.rounds_completed, "round_count", None, || {
        format!("{} records, {} reported, {} market rounds", recs.len(), summary.rounds_completed, rounds.len())
    });
    rep.check(summary.status == RunStatus::Complete, "status", None, || format!("{:?}", summary.status));
    rep.check(summary.invariant_violations.is_empty(), "recorded_violations", None, || {
        format!("{} violations recorded, first: {:?}", summary.invariant_violations.len(), summary.invariant_violations.first())
    });

    let x_bound = iterate_stability_bound(&trace.learner);
    let u_bound = leader_stability_bound(&trace.learner);
    let floor = alpha_floor(&dims);
    let mut cumulative = 0.0;
    let mut max_grad: f64 = 0.0;
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut learner_wealth = WealthProduct::default();

    for (k, (rec, r)) in recs.iter().zip(rounds).enumerate() {
        let round = Some(rec.global_round);
        rep.check(rec.global_round == k + 1, "global_round", round, || format!("expected {}", k + 1));

        let membership = if trace.learner.clipped() { check_clipped(&rec.x, &dims) } else { check_simplex(&rec.x) };
        rep.check(membership.is_ok(), "simplex", round, || format!("{membership:?}"));
        if rec.x.len() != r.len() {
            rep.check(false, "dimension", round, || format!("{} weights for {} assets", rec.x.len(), r.len()));
            continue;
        }

        let lr = match log_loss(&rec.x, r) {
            Ok(l) => l,
            Err(e) => {
                rep.check(false, "loss", round, || e.to_string());
                continue;
            }
        };
        rep.check(close(lr.loss, rec.loss, 1e-12), "loss", round, || format!("recorded {} recomputed {}", rec.loss, lr.loss));
        cumulative += rec.loss;
        rep.check(close(cumulative, rec.cumulative_loss, REL_TOL), "prefix_sum", round, || {
            format!("recorded {} recomputed {cumulative}", rec.cumulative_loss)
        });
        let g = lr.grad_inf_norm();
        max_grad = max_grad.max(g);
        rep.check(close(g, rec.grad_inf_norm, 1e-12), "grad_inf_norm", round, || {
            format!("recorded {} recomputed {g}", rec.grad_inf_norm)
        });
        learner_wealth.mul(dot(&rec.x, r.as_slice()));

        let prev = k.checked_sub(1).map(|j| &recs[j]);
        let same_epoch = prev.filter(|p| !p.restart && p.epoch_index == rec.epoch_index);

        if let Some(bound) = x_bound {
            if let Some(p) = same_epoch {
                let dev = ratio_deviation(&rec.x, &p.x);
                rep.check(dev <= bound, "iterate_stability", round, || format!("deviation {dev:e} exceeds {bound:e}"));
            }
        }

        if let Some(p) = prev {
            if p.restart {
                rep.check(rec.epoch_index == p.epoch_index + 1 && rec.epoch_round == 1, "epoch_reset", round, || {
                    format!("epoch {} round {} after a restart in epoch {}", rec.epoch_index, rec.epoch_round, p.epoch_index)
                });
                if let (Some(b0), Some(b1)) = (p.beta, rec.beta) {
                    rep.check(b1 == b0 / 2.0, "beta_halving", round, || format!("{b0} then {b1}"));
                }
                let uniform = dims.uniform();
                let dev = rec.x.iter().zip(&uniform).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                rep.check(dev <= 1e-15, "restart_uniform", round, || format!("max deviation from uniform {dev:e}"));
            } else if is_ada || trace.learner.kind == LearnerKind::Barrons {
                rep.check(
                    rec.epoch_index == p.epoch_index && rec.epoch_round == p.epoch_round + 1 && rec.beta == p.beta,
                    "epoch_continuity",
                    round,
                    || format!("epoch {}/{} after {}/{}", rec.epoch_index, rec.epoch_round, p.epoch_index, p.epoch_round),
                );
            }
        }

        if !is_ada {
            rep.check(!rec.restart, "restart_flag", round, || "restart recorded for a learner without restarts".into());
            continue;
        }

        if prev.is_none_or(|p| p.restart) {
            history.clear();
        }
        history.push(HistoryEntry { x: rec.x.clone(), gradient: lr.gradient.clone() });

        let (Some(u), Some(a), Some(beta)) = (&rec.leader, rec.alpha, rec.beta) else {
            rep.check(false, "ada_fields", round, || "leader, alpha or beta missing".into());
            continue;
        };
        let membership = check_clipped(u, &dims);
        rep.check(membership.is_ok(), "leader_simplex", round, || format!("{membership:?}"));
        let a_re = alpha(u, &history);
        rep.check(close(a, a_re, REL_TOL), "alpha", round, || format!("recorded {a} recomputed {a_re}"));
        rep.check(a >= floor && a <= 0.5, "alpha_range", round, || format!("{a:e} outside [{floor:e}, 0.5]"));
        rep.check(rec.restart == (beta > a), "restart_rule", round, || {
            format!("restart={} with beta {beta} and alpha {a}", rec.restart)
        });

        if let Some(p) = same_epoch {
            if let Some(pu) = &p.leader {
                let dev = ratio_deviation(u, pu);
                if let Some(bound) = u_bound {
                    rep.check(dev <= bound, "leader_stability", round, || format!("deviation {dev:e} exceeds {bound:e}"));
                }
                if let Some(recorded) = rec.u_ratio_dev {
                    rep.check(close(dev, recorded, REL_TOL), "leader_ratio_record", round, || {
                        format!("recorded {recorded} recomputed {dev}")
                    });
                }
                if rec.restart {
                    let check = RatioMaxCheck {
                        previous: ratio_max(pu, &history[..history.len() - 1]),
                        current: ratio_max(u, &history),
                    };
                    rep.check(check.holds(), "ratio_max", round, || {
                        format!("a_prev {:e} below half of a_t {:e}", check.previous, check.current)
                    });
                }
            }
        }
    }

    let epoch_count = recs.iter().map(|p| p.epoch_index).max().unwrap_or(1);
    let bound = epoch_bound(&dims);
    rep.check(summary.epoch_count == epoch_count, "epoch_count", None, || {
        format!("reported {} observed {epoch_count}", summary.epoch_count)
    });
    rep.check(epoch_count <= bound, "epoch_bound", None, || format!("{epoch_count} epochs exceed {bound}"));
    let restarts = recs.iter().filter(|p| p.restart).count();
    rep.check(summary.restarts == restarts, "restart_count", None, || format!("reported {} observed {restarts}", summary.restarts));
    rep.check(close(summary.total_loss, cumulative, REL_TOL), "total_loss", None, || {
        format!("reported {} recomputed {cumulative}", summary.total_loss)
    });
    rep.check(summary.max_grad_inf_norm == max_grad, "max_grad", None, || {
        format!("reported {} recomputed {max_grad}", summary.max_grad_inf_norm)
    });

    if summary.status != RunStatus::Complete || recs.len() != rounds.len() {
        return rep;
    }
    let (Some(u), Some(u_loss), Some(regret), Some(mult)) =
        (&summary.best_crp, summary.best_crp_loss, summary.regret, summary.regret_multiplicative)
    else {
        rep.check(false, "summary_fields", None, || "best CRP or regret missing".into());
        return rep;
    };
    let membership = check_clipped(u, &dims);
    rep.check(membership.is_ok(), "best_crp_simplex", None, || format!("{membership:?}"));
    let recomputed = crp_loss(u, rounds);
    rep.check(close(recomputed, u_loss, REL_TOL), "best_crp_loss", None, || {
        format!("reported {u_loss} recomputed {recomputed}")
    });
    rep.check(close(regret, cumulative - u_loss, REL_TOL), "regret", None, || {
        format!("reported {regret} recomputed {}", cumulative - u_loss)
    });
    let mut crp_wealth = WealthProduct::default();
    for r in rounds {
        crp_wealth.mul(dot(u, r.as_slice()));
    }
    let mult_re = -(learner_wealth.ln() - crp_wealth.ln());
    rep.check(close(mult, mult_re, REL_TOL), "regret_multiplicative", None, || {
        format!("reported {mult} recomputed {mult_re}")
    });
    rep.check(close(regret, mult, 1e-6), "multiplicative_identity", None, || format!("additive {regret} multiplicative {mult}"));
    match best_crp(rounds, &dims, &trace.solver) {
        Ok((_, resolved)) => rep.check(close(resolved, u_loss, 1e-6), "best_crp_optimal", None, || {
            format!("reported {u_loss} re-solved {resolved}")
        }),
        Err(e) => rep.check(false, "best_crp_optimal", None, || e.to_string()),
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ProblemDims;
    use crate::harness::{run_experiment, LearnerConfig, Market, RunOptions};
    use crate::markets::{MarketKind, MarketSpec};
    use crate::solver::SolverConfig;

    fn trace(kind: LearnerKind, market: MarketKind, t: usize) -> ExperimentResult {
        let m = Market::from_spec(&MarketSpec::new(market, ProblemDims::new(2, t).unwrap(), 5)).unwrap();
        run_experiment(&LearnerConfig::new(kind), &m, &SolverConfig::default(), RunOptions::default()).unwrap()
    }

    #[test]
    fn fresh_traces_verify() {
        for kind in [LearnerKind::Ada, LearnerKind::Ons, LearnerKind::Eg, LearnerKind::UpGrid] {
            let rep = verify(&trace(kind, MarketKind::Blowup, 64));
            assert!(rep.passed(), "{kind:?}: {:?}", rep.failures);
            assert!(rep.checks_run > 64);
        }
    }

    #[test]
    fn json_round_trip_still_verifies() {
        let t = trace(LearnerKind::Ada, MarketKind::IidLognormal, 48);
        let back = ExperimentResult::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert!(verify(&back).passed());
    }

    #[test]
    fn tampering_is_detected() {
        let good = trace(LearnerKind::Ada, MarketKind::Blowup, 64);

        let mut t = good.clone();
        t.per_round[3].loss += 1e-6;
        assert!(verify(&t).failures.iter().any(|f| f.check == "loss"));

        let mut t = good.clone();
        t.per_round[5].x = vec![0.6, 0.5];
        assert!(verify(&t).failures.iter().any(|f| f.check == "simplex"));

        let mut t = good.clone();
        t.summary.regret = Some(t.summary.regret.unwrap() - 0.1);
        assert!(verify(&t).failures.iter().any(|f| f.check == "regret"));

        let mut t = good.clone();
        t.per_round[7].alpha = Some(0.01);
        assert!(!verify(&t).passed());

        let mut t = good.clone();
        t.summary.best_crp = Some(vec![0.9, 0.1]);
        assert!(verify(&t).failures.iter().any(|f| f.check == "best_crp_loss"));
    }

    #[test]
    fn restart_bookkeeping_checked() {
        let good = trace(LearnerKind::Ada, MarketKind::Blowup, 64);
        let k = good.per_round.iter().position(|p| p.restart).expect("blowup restarts");
        let mut t = good.clone();
        t.per_round[k].restart = false;
        let rep = verify(&t);
        assert!(rep.failures.iter().any(|f| f.check == "restart_rule"), "{:?}", rep.failures);
    }
}
