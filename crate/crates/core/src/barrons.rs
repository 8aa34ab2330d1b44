//! Barrier-regularized Online Newton Step.
//!
//! Online mirror descent over the clipped simplex with the mixed regularizer
//! `psi_t(x) = (beta/2) x^T A_t x + sum_i (1/eta_{t,i}) ln(1/x_i)`, where `A_t`
//! accumulates gradient outer products and each coordinate's learning rate
//! grows as its weight shrinks:
//! `eta_{t,i} = eta * exp(max_{s<=t} log_T(1/(N x_{s,i})))`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::domain::{check_clipped, loss_and_gradient, DomainError, LossRecord, MarketRound, PortfolioState, ProblemDims};
use crate::solver::{minimize_over_clipped_simplex, Objective, SolverConfig, SolverError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BarronsError {
    #[error("beta must lie in (0, 1/2], got {0}")]
    InvalidBeta(f64),
    #[error("eta must lie in (0, 1], got {0}")]
    InvalidEta(f64),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("OMD step failed: {0}")]
    Solver(#[from] SolverError),
}

/// One observed round of an epoch: the point played and the gradient seen there.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub x: Vec<f64>,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BarronsState {
    dims: ProblemDims,
    /// Index of the round about to be played, starting at 1.
    t: usize,
    x: PortfolioState,
    a: DMatrix<f64>,
    log_max: Vec<f64>,
    eta: Vec<f64>,
    beta: f64,
    eta_base: f64,
    history: Vec<HistoryEntry>,
}

/// What one BARRONS round produced.
#[derive(Debug, Clone)]
pub struct BarronsStep {
    pub played: PortfolioState,
    pub loss: LossRecord,
    pub next: PortfolioState,
    pub newton_iterations: usize,
}

impl BarronsState {
    /// Uniform start, `A_0 = N I`, every learning rate at `eta_base`.
    pub fn new(dims: ProblemDims, beta: f64, eta_base: f64) -> Result<Self, BarronsError> {
        if !(beta > 0.0 && beta <= 0.5) {
            return Err(BarronsError::InvalidBeta(beta));
        }
        if !(eta_base > 0.0 && eta_base <= 1.0) {
            return Err(BarronsError::InvalidEta(eta_base));
        }
        let n = dims.assets();
        Ok(Self {
            dims,
            t: 1,
            x: PortfolioState::uniform(&dims),
            a: DMatrix::identity(n, n) * n as f64,
            log_max: vec![0.0; n],
            eta: vec![eta_base; n],
            beta,
            eta_base,
            history: Vec::new(),
        })
    }

    pub fn dims(&self) -> &ProblemDims {
        &self.dims
    }

    pub fn round(&self) -> usize {
        self.t
    }

    pub fn current(&self) -> &PortfolioState {
        &self.x
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn learning_rates(&self) -> &[f64] {
        &self.eta
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn eta_base(&self) -> f64 {
        self.eta_base
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Play `x_t`, observe `r`, and compute `x_{t+1}`. The state is unchanged on error.
    pub fn step(&mut self, r: &MarketRound, solver: &SolverConfig) -> Result<BarronsStep, BarronsError> {
        let n = self.dims.assets();
        if r.len() != n {
            return Err(DomainError::DimensionMismatch { expected: n, actual: r.len() }.into());
        }
        let loss = loss_and_gradient(&self.x, r);
        let grad = DVector::from_column_slice(&loss.gradient);
        let a = &self.a + &grad * grad.transpose();

        let ln_t = self.dims.ln_horizon();
        let mut log_max = self.log_max.clone();
        for (m, &xi) in log_max.iter_mut().zip(self.x.as_slice()) {
            let level = (1.0 / (n as f64 * xi)).ln() / ln_t;
            if level > *m {
                *m = level;
            }
        }
        let eta: Vec<f64> = log_max.iter().map(|m| self.eta_base * m.exp()).collect();

        let objective = OmdObjective {
            gradient: &loss.gradient,
            anchor: self.x.as_slice(),
            gram: &a,
            beta: self.beta,
            eta: &eta,
        };
        let solution = minimize_over_clipped_simplex(&objective, self.x.as_slice(), &self.dims, solver)?;
        debug_assert!(check_clipped(solution.x.as_slice(), &self.dims).is_ok());

        let played = std::mem::replace(&mut self.x, solution.x.clone());
        self.history.push(HistoryEntry { x: played.as_slice().to_vec(), gradient: loss.gradient.clone() });
        self.a = a;
        self.log_max = log_max;
        self.eta = eta;
        self.t += 1;
        Ok(BarronsStep { played, loss, next: solution.x, newton_iterations: solution.newton_iterations })
    }
}

/// `<x, g> + D_psi(x, anchor)` with constants dropped:
/// `<x, g> + (beta/2)(x - y)^T A (x - y) + sum_i (1/eta_i)(x_i/y_i - ln(x_i/y_i))`.
pub struct OmdObjective<'a> {
    pub gradient: &'a [f64],
    pub anchor: &'a [f64],
    pub gram: &'a DMatrix<f64>,
    pub beta: f64,
    pub eta: &'a [f64],
}

impl Objective for OmdObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut v = 0.0;
        for i in 0..n {
            if !(x[i] > 0.0) {
                return f64::INFINITY;
            }
            let ratio = x[i] / self.anchor[i];
            v += x[i] * self.gradient[i] + (ratio - ratio.ln()) / self.eta[i];
        }
        let mut quad = 0.0;
        for i in 0..n {
            let di = x[i] - self.anchor[i];
            for j in 0..n {
                quad += di * self.gram[(i, j)] * (x[j] - self.anchor[j]);
            }
        }
        v + 0.5 * self.beta * quad
    }

    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let n = x.len();
        let d = DVector::from_iterator(n, x.iter().zip(self.anchor).map(|(a, b)| a - b));
        let ad = self.gram * d;
        DVector::from_fn(n, |i, _| {
            self.gradient[i] + self.beta * ad[i] + (1.0 / self.anchor[i] - 1.0 / x[i]) / self.eta[i]
        })
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut h = self.gram * self.beta;
        for i in 0..x.len() {
            h[(i, i)] += 1.0 / (self.eta[i] * x[i] * x[i]);
        }
        h
    }
}

/// `h(z) = z - 1 - ln z`.
fn barrier_gap(z: f64) -> f64 {
    z - 1.0 - z.ln()
}

/// Bregman divergence of `psi` between `x` and `y`:
/// `(beta/2)(x - y)^T A (x - y) + sum_i (1/eta_i) h(x_i / y_i)`.
pub fn bregman_divergence(x: &[f64], y: &[f64], a: &DMatrix<f64>, beta: f64, eta: &[f64]) -> f64 {
    let d = DVector::from_iterator(x.len(), x.iter().zip(y).map(|(p, q)| p - q));
    let quad = (d.transpose() * a * &d)[(0, 0)];
    let barrier: f64 = x.iter().zip(y).zip(eta).map(|((p, q), e)| barrier_gap(p / q) / e).sum();
    0.5 * beta * quad + barrier
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::normalize_round;
    use crate::solver::grid_search_oracle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dims(n: usize, t: usize) -> ProblemDims {
        ProblemDims::new(n, t).unwrap()
    }

    fn ada_eta(d: &ProblemDims) -> f64 {
        1.0 / (2048.0 * d.assets() as f64 * d.ln_horizon().powi(2))
    }

    #[test]
    fn init_examples() {
        let s = BarronsState::new(dims(2, 16), 0.5, 0.01).unwrap();
        assert_eq!(s.current().as_slice(), &[0.5, 0.5]);
        assert_eq!(s.gram(), &(DMatrix::identity(2, 2) * 2.0));
        assert_eq!(s.learning_rates(), &[0.01, 0.01]);
        assert_eq!(s.round(), 1);
        assert!(s.history().is_empty());

        let s = BarronsState::new(dims(3, 16), 0.5, 0.01).unwrap();
        assert_eq!(s.current().as_slice(), &[1.0 / 3.0; 3]);
        assert_eq!(s.gram(), &(DMatrix::identity(3, 3) * 3.0));

        assert_eq!(BarronsState::new(dims(2, 16), 0.6, 0.01).unwrap_err(), BarronsError::InvalidBeta(0.6));
        assert_eq!(BarronsState::new(dims(2, 16), 0.0, 0.01).unwrap_err(), BarronsError::InvalidBeta(0.0));
        assert_eq!(BarronsState::new(dims(2, 16), 0.5, 1.5).unwrap_err(), BarronsError::InvalidEta(1.5));
    }

    #[test]
    fn constant_market_keeps_uniform() {
        let d = dims(2, 16);
        let mut s = BarronsState::new(d, 0.5, ada_eta(&d)).unwrap();
        let r = normalize_round(&[1.0, 1.0]).unwrap();
        for _ in 0..15 {
            let out = s.step(&r, &SolverConfig::default()).unwrap();
            assert_eq!(out.loss.gradient, vec![-1.0, -1.0]);
            for v in s.current().as_slice() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_step_matches_grid_oracle() {
        let d = dims(2, 16);
        let eta = ada_eta(&d);
        let mut s = BarronsState::new(d, 0.5, eta).unwrap();
        let r = normalize_round(&[1.0, 0.5]).unwrap();
        s.step(&r, &SolverConfig::default()).unwrap();

        // same objective, assembled by hand for the oracle
        let g = vec![-4.0 / 3.0, -2.0 / 3.0];
        let gv = DVector::from_column_slice(&g);
        let a = DMatrix::identity(2, 2) * 2.0 + &gv * gv.transpose();
        let obj = OmdObjective { gradient: &g, anchor: &[0.5, 0.5], gram: &a, beta: 0.5, eta: &[eta, eta] };
        let oracle = grid_search_oracle(&obj, &d, 1e-5).unwrap();
        for (x, o) in s.current().as_slice().iter().zip(oracle.as_slice()) {
            assert!((x - o).abs() <= 1e-4, "{:?} vs {:?}", s.current(), oracle);
        }
        // asset 1 paid more, so it gains weight
        let x2 = s.current().as_slice().to_vec();
        assert!(x2[0] > 0.5);

        // schedule from x_1 only: x_1 is uniform, so both rates stay at eta
        assert_relative_eq!(s.learning_rates()[0], eta, max_relative = 1e-12);
        assert_relative_eq!(s.learning_rates()[1], eta, max_relative = 1e-12);

        // after playing x_2, the coordinate below 1/N picks up a larger rate
        s.step(&r, &SolverConfig::default()).unwrap();
        let expected = eta * ((1.0 / (2.0 * x2[1])).ln() / 16f64.ln()).exp();
        assert_relative_eq!(s.learning_rates()[1], expected, max_relative = 1e-12);
        assert_relative_eq!(s.learning_rates()[0], eta, max_relative = 1e-12);
    }

    #[test]
    fn bregman_examples() {
        let a = DMatrix::zeros(2, 2);
        let v = bregman_divergence(&[0.6, 0.4], &[0.5, 0.5], &a, 0.5, &[1.0, 1.0]);
        let expected = (0.2 - 1.2f64.ln()) + (-0.2 - 0.8f64.ln());
        assert_relative_eq!(v, expected, epsilon = 1e-15);
        assert_relative_eq!(v, 0.040_821_994_520_255, epsilon = 1e-12);

        let a = DMatrix::identity(2, 2) * 3.0;
        assert_eq!(bregman_divergence(&[0.3, 0.7], &[0.3, 0.7], &a, 0.5, &[0.1, 0.2]), 0.0);
        let pure = bregman_divergence(&[0.3, 0.7], &[0.6, 0.4], &a, 0.0, &[0.1, 0.2]);
        let by_hand = barrier_gap(0.5) / 0.1 + barrier_gap(0.7 / 0.4) / 0.2;
        assert_relative_eq!(pure, by_hand, epsilon = 1e-12);
    }

    #[test]
    fn state_invariants_over_a_run() {
        let d = dims(3, 64);
        let eta = ada_eta(&d);
        let mut s = BarronsState::new(d, 0.25, eta).unwrap();
        let rounds: Vec<MarketRound> = (0..40)
            .map(|t| {
                let raw = match t % 3 {
                    0 => [1.0, 0.1, 0.5],
                    1 => [0.2, 1.0, 0.9],
                    _ => [1.0, 1.0, 0.05],
                };
                normalize_round(&raw).unwrap()
            })
            .collect();
        let bound = (3.0 * eta).sqrt() / 2.0 + 1e-8;
        let mut prev_eta = s.learning_rates().to_vec();
        for r in &rounds {
            let out = s.step(r, &SolverConfig::default()).unwrap();
            for (next, prev) in out.next.as_slice().iter().zip(out.played.as_slice()) {
                assert!((next / prev - 1.0).abs() <= bound);
            }
            for (e, p) in s.learning_rates().iter().zip(&prev_eta) {
                assert!(e >= p);
                assert!(*e >= eta && *e <= std::f64::consts::E * eta * (1.0 + 1e-12));
            }
            prev_eta = s.learning_rates().to_vec();
        }
        // A is reconstructible from history and stays above N I
        let mut rebuilt = DMatrix::identity(3, 3) * 3.0;
        for h in s.history() {
            let g = DVector::from_column_slice(&h.gradient);
            rebuilt += &g * g.transpose();
        }
        assert!((&rebuilt - s.gram()).amax() <= 1e-8 * rebuilt.amax());
        let min_eig = s.gram().clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= 3.0 - 1e-9);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let d = dims(2, 32);
        let rounds: Vec<MarketRound> =
            (0..20).map(|t| normalize_round(&[1.0, if t % 2 == 0 { 0.3 } else { 0.9 }]).unwrap()).collect();
        let run = || {
            let mut s = BarronsState::new(d, 0.5, ada_eta(&d)).unwrap();
            rounds.iter().map(|r| s.step(r, &SolverConfig::default()).unwrap().next.into_inner()).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn solver_failure_leaves_state_untouched() {
        let d = dims(2, 16);
        let mut s = BarronsState::new(d, 0.5, 0.01).unwrap();
        let cfg = SolverConfig { max_newton_iters: 1, kkt_tol: 1e-300, ..SolverConfig::default() };
        let r = normalize_round(&[1.0, 0.1]).unwrap();
        assert!(matches!(s.step(&r, &cfg), Err(BarronsError::Solver(_))));
        assert_eq!(s.round(), 1);
        assert!(s.history().is_empty());
    }

    fn clipped(n: usize, t: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0..1.0f64, n).prop_filter_map("nonzero", move |w| {
            let s: f64 = w.iter().sum();
            let d = ProblemDims::new(n, t).unwrap();
            (s > 1e-9).then(|| {
                let u: Vec<f64> = w.iter().map(|v| v / s).collect();
                crate::domain::smooth_comparator(&u, &d).unwrap().into_inner()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn divergence_is_nonnegative(
            x in clipped(3, 20),
            y in clipped(3, 20),
            g in prop::collection::vec(-20.0..0.0f64, 3),
            beta in 0.0..0.5f64,
            eta in prop::collection::vec(1e-5..1.0f64, 3),
        ) {
            let gv = DVector::from_column_slice(&g);
            let a = DMatrix::identity(3, 3) * 3.0 + &gv * gv.transpose();
            prop_assert!(bregman_divergence(&x, &y, &a, beta, &eta) >= -1e-12);
        }
    }
}
