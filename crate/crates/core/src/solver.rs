//! Path-following Newton solver for strictly convex objectives over the
//! clipped simplex `{x : sum(x) = 1, x_i >= 1/(NT)}`.
//!
//! The floor constraint is enforced with an auxiliary log barrier
//! `-mu * sum ln(x_i - 1/(NT))` whose weight shrinks geometrically. Each
//! barrier stage runs equality-constrained Newton (null-space reduction of
//! `sum(dx) = 0`) with a fraction-to-the-boundary rule and Armijo
//! backtracking, warm-started from the previous stage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{check_clipped, DomainError, PortfolioState, ProblemDims};

/// A twice-differentiable objective on the open positive orthant.
///
/// `value` should return `+inf` (or NaN) outside its domain; the line search
/// treats any non-finite value as infeasible.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> DVector<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

impl<O: Objective + ?Sized> Objective for &O {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).hessian(x)
    }
}

/// Objective assembled from three closures.
pub struct FnObjective<V, G, H> {
    pub value: V,
    pub gradient: G,
    pub hessian: H,
}

impl<V, G, H> Objective for FnObjective<V, G, H>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> DVector<f64>,
    H: Fn(&[f64]) -> DMatrix<f64>,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64]) -> DVector<f64> {
        (self.gradient)(x)
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        (self.hessian)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kkt_tol: f64,
    pub max_newton_iters: usize,
    pub barrier_mu_init: f64,
    pub barrier_shrink: f64,
    pub min_barrier_mu: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-10,
            max_newton_iters: 100,
            barrier_mu_init: 1.0,
            barrier_shrink: 0.1,
            min_barrier_mu: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let ok = self.kkt_tol > 0.0
            && self.max_newton_iters > 0
            && self.barrier_mu_init > 0.0
            && self.min_barrier_mu > 0.0
            && self.barrier_shrink > 0.0
            && self.barrier_shrink < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SolverError::InvalidConfig(*self))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid solver configuration {0:?}")]
    InvalidConfig(SolverConfig),
    #[error("warm start is not in the clipped simplex: {0}")]
    InvalidWarmStart(#[from] DomainError),
    #[error("Newton iteration limit hit at barrier weight {mu:e} (residual {residual:e})")]
    MaxIterations { mu: f64, last: Vec<f64>, residual: f64 },
    #[error("line search stalled at barrier weight {mu:e} (decrement {decrement:e})")]
    LineSearch { mu: f64, last: Vec<f64>, decrement: f64 },
    #[error("objective is not finite at a feasible point")]
    NonFinite { last: Vec<f64> },
    #[error("grid oracle supports N in {{2, 3}}, got {0}")]
    UnsupportedDimension(usize),
    #[error("grid resolution must be positive, got {0}")]
    InvalidResolution(f64),
}

impl SolverError {
    /// Last iterate reached before the failure, when there is one.
    pub fn last_iterate(&self) -> Option<&[f64]> {
        match self {
            SolverError::MaxIterations { last, .. }
            | SolverError::LineSearch { last, .. }
            | SolverError::NonFinite { last } => Some(last),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: PortfolioState,
    /// Objective value at `x`, without the auxiliary barrier.
    pub value: f64,
    pub newton_iterations: usize,
    pub stages: usize,
    /// `min_nu ||grad + nu 1||_inf` of the barrier-augmented problem, where the
    /// barrier gradient plays the role of the bound multipliers.
    pub kkt_residual: f64,
    pub final_mu: f64,
    /// Barrier-augmented objective after each accepted iterate, per stage.
    pub stage_values: Vec<Vec<f64>>,
}

const FRACTION_TO_BOUNDARY: f64 = 0.99;
const ARMIJO: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP: f64 = 1e-14;
/// Extra Newton steps allowed once the decrement test passes, to drive the residual down.
const POLISH_STEPS: usize = 2;

struct Barrier<'a, O: ?Sized> {
    obj: &'a O,
    floor: f64,
    mu: f64,
}

impl<O: Objective + ?Sized> Barrier<'_, O> {
    fn value(&self, x: &[f64]) -> f64 {
        let mut log_slack = 0.0;
        for &xi in x {
            let s = xi - self.floor;
            if !(s > 0.0) {
                return f64::INFINITY;
            }
            log_slack += s.ln();
        }
        let f = self.obj.value(x);
        if f.is_nan() {
            return f64::INFINITY;
        }
        f - self.mu * log_slack
    }
}

struct NewtonStep {
    dx: Vec<f64>,
    /// Squared Newton decrement `-g^T dx`.
    decrement_sq: f64,
    residual: f64,
    scale: f64,
}

fn newton_step<O: Objective + ?Sized>(b: &Barrier<'_, O>, x: &[f64]) -> Option<NewtonStep> {
    let n = x.len();
    let grad_f = b.obj.gradient(x);
    let mut hess = b.obj.hessian(x);
    let scale = grad_f.amax().max(1.0);

    let mut g = grad_f;
    for i in 0..n {
        let s = x[i] - b.floor;
        g[i] -= b.mu / s;
        hess[(i, i)] += b.mu / (s * s);
    }
    if g.iter().any(|v| !v.is_finite()) || hess.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let (gmax, gmin) = g.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &v| (hi.max(v), lo.min(v)));
    let residual = 0.5 * (gmax - gmin);

    // Null-space basis e_i - e_k of {sum(dx) = 0}, pivoting on the largest weight.
    let k = (0..n).max_by(|&a, &c| x[a].total_cmp(&x[c])).unwrap_or(0);
    let free: Vec<usize> = (0..n).filter(|&i| i != k).collect();
    let m = free.len();
    let mut hz = DMatrix::zeros(m, m);
    let mut gz = DVector::zeros(m);
    for (a, &i) in free.iter().enumerate() {
        gz[a] = g[i] - g[k];
        for (c, &j) in free.iter().enumerate() {
            let hij = 0.5 * (hess[(i, j)] + hess[(j, i)]);
            let hik = 0.5 * (hess[(i, k)] + hess[(k, i)]);
            let hkj = 0.5 * (hess[(k, j)] + hess[(j, k)]);
            hz[(a, c)] = hij - hik - hkj + hess[(k, k)];
        }
    }
    let y = solve_spd(hz, -&gz)?;
    let mut dx = vec![0.0; n];
    let mut sum = 0.0;
    for (a, &i) in free.iter().enumerate() {
        dx[i] = y[a];
        sum += y[a];
    }
    dx[k] = -sum;
    let decrement_sq = -g.iter().zip(&dx).map(|(gi, di)| gi * di).sum::<f64>();
    Some(NewtonStep { dx, decrement_sq: decrement_sq.max(0.0), residual, scale })
}

/// Cholesky, falling back to an eigen pseudo-inverse when the reduced Hessian
/// is numerically singular (flat directions of a merely convex objective).
fn solve_spd(h: DMatrix<f64>, rhs: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = h.clone().cholesky() {
        let y = chol.solve(&rhs);
        if y.iter().all(|v| v.is_finite()) {
            return Some(y);
        }
    }
    let eig = h.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if !(top > 0.0) {
        return None;
    }
    let cutoff = top * 1e-14;
    let qt_rhs = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_iterator(
        qt_rhs.len(),
        qt_rhs.iter().zip(eig.eigenvalues.iter()).map(|(v, &l)| if l > cutoff { v / l } else { 0.0 }),
    );
    Some(&eig.eigenvectors * scaled)
}

fn center<O: Objective + ?Sized>(
    b: &Barrier<'_, O>,
    x: &mut Vec<f64>,
    cfg: &SolverConfig,
    iterations: &mut usize,
    values: &mut Vec<f64>,
) -> Result<(), SolverError> {
    let mut phi = b.value(x);
    if !phi.is_finite() {
        return Err(SolverError::NonFinite { last: x.clone() });
    }
    values.push(phi);
    let mut polish = 0;
    let mut steps = 0;
    loop {
        let step = newton_step(b, x).ok_or_else(|| SolverError::NonFinite { last: x.clone() })?;
        let dec = 0.5 * step.decrement_sq;
        if dec <= cfg.kkt_tol {
            if step.residual <= cfg.kkt_tol * step.scale || polish >= POLISH_STEPS || dec == 0.0 {
                return Ok(());
            }
            polish += 1;
        }
        if steps >= cfg.max_newton_iters {
            return Err(SolverError::MaxIterations { mu: b.mu, last: x.clone(), residual: step.residual });
        }

        let mut max_step = f64::INFINITY;
        for (xi, di) in x.iter().zip(&step.dx) {
            if *di < 0.0 {
                max_step = max_step.min((xi - b.floor) / -di);
            }
        }
        let mut t = if max_step.is_finite() { (FRACTION_TO_BOUNDARY * max_step).min(1.0) } else { 1.0 };
        let slope = -step.decrement_sq;
        // absorb rounding in phi so converged iterates are not rejected
        let slack = 64.0 * f64::EPSILON * phi.abs().max(1.0);
        let mut trial = vec![0.0; x.len()];
        let accepted = loop {
            for ((ti, xi), di) in trial.iter_mut().zip(x.iter()).zip(&step.dx) {
                *ti = xi + t * di;
            }
            let phi_new = b.value(&trial);
            if phi_new <= phi + ARMIJO * t * slope + slack {
                // a backtracked step that only passes on the slack is stagnation, not progress
                if t < 1.0 && phi_new >= phi {
                    break None;
                }
                break Some(phi_new);
            }
            t *= BACKTRACK;
            if t < MIN_STEP {
                break None;
            }
        };
        match accepted {
            Some(phi_new) => {
                std::mem::swap(x, &mut trial);
                phi = phi_new;
                values.push(phi);
                steps += 1;
                *iterations += 1;
            }
            None => {
                // No representable decrease left: we are at the rounding floor.
                if dec <= 1e-6 * phi.abs().max(1.0) {
                    return Ok(());
                }
                return Err(SolverError::LineSearch { mu: b.mu, last: x.clone(), decrement: dec });
            }
        }
    }
}

/// Euclidean projection onto `{y : sum y = 1, y_i >= floor}`.
fn project_clipped(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len();
    let mass = 1.0 - n as f64 * floor;
    let mut sorted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - mass) / (k + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| floor + (x - floor - theta).max(0.0)).collect()
}

/// `||x - P(x - grad f(x))||_inf`, zero exactly at a minimizer of the constrained problem.
fn natural_residual<O: Objective + ?Sized>(obj: &O, x: &[f64], floor: f64) -> f64 {
    let g = obj.gradient(x);
    let moved: Vec<f64> = x.iter().zip(g.iter()).map(|(xi, gi)| xi - gi).collect();
    let p = project_clipped(&moved, floor);
    x.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Minimize `obj` over the clipped simplex of `dims`, starting from `warm_start`.
pub fn minimize_over_clipped_simplex<O: Objective + ?Sized>(
    obj: &O,
    warm_start: &[f64],
    dims: &ProblemDims,
    cfg: &SolverConfig,
) -> Result<Solution, SolverError> {
    cfg.validate()?;
    check_clipped(warm_start, dims)?;
    let floor = dims.floor();
    let n = dims.assets();

    let mut x = warm_start.to_vec();
    if x.iter().any(|&xi| xi - floor <= 0.0) {
        // within tolerance of the face but not strictly inside: pull toward uniform
        let theta = 1e-9;
        for xi in x.iter_mut() {
            *xi = (1.0 - theta) * *xi + theta / n as f64;
        }
    }

    let mut iterations = 0;
    let mut stage_values = Vec::new();

    // Already optimal for the final stage: return without walking the path.
    let last = Barrier { obj, floor, mu: cfg.min_barrier_mu };
    if let Some(step) = newton_step(&last, &x) {
        let natural = natural_residual(obj, &x, floor);
        if 0.5 * step.decrement_sq <= cfg.kkt_tol && natural <= cfg.kkt_tol * step.scale {
            let value = obj.value(&x);
            return Ok(Solution {
                x: PortfolioState::from_trusted(x),
                value,
                newton_iterations: 0,
                stages: 0,
                kkt_residual: natural,
                final_mu: cfg.min_barrier_mu,
                stage_values,
            });
        }
    }

    let mut mu = cfg.barrier_mu_init.max(cfg.min_barrier_mu);
    let mut stages = 0;
    loop {
        let barrier = Barrier { obj, floor, mu };
        let mut values = Vec::new();
        center(&barrier, &mut x, cfg, &mut iterations, &mut values)?;
        stage_values.push(values);
        stages += 1;
        if mu <= cfg.min_barrier_mu {
            break;
        }
        mu = (mu * cfg.barrier_shrink).max(cfg.min_barrier_mu);
    }
    let residual = natural_residual(obj, &x, floor);

    let value = obj.value(&x);
    if !value.is_finite() {
        return Err(SolverError::NonFinite { last: x });
    }
    Ok(Solution {
        x: PortfolioState::from_trusted(x),
        value,
        newton_iterations: iterations,
        stages,
        kkt_residual: residual,
        final_mu: mu,
        stage_values,
    })
}

/// Brute-force minimizer over a grid of the clipped simplex, for N in {2, 3}.
///
/// For N = 2 every grid point is evaluated. For N = 3 every value of the first
/// coordinate is enumerated and, on each slice, the second coordinate is found
/// by discrete ternary search, which is exact on the grid for convex objectives.
pub fn grid_search_oracle<O: Objective + ?Sized>(
    obj: &O,
    dims: &ProblemDims,
    resolution: f64,
) -> Result<PortfolioState, SolverError> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(SolverError::InvalidResolution(resolution));
    }
    let floor = dims.floor();
    match dims.assets() {
        2 => {
            let steps = ((1.0 - 2.0 * floor) / resolution + 1e-9).floor() as usize;
            let mut best = (f64::INFINITY, vec![0.5, 0.5]);
            for i in 0..=steps {
                let a = floor + i as f64 * resolution;
                let x = [a, 1.0 - a];
                let v = obj.value(&x);
                if v < best.0 {
                    best = (v, x.to_vec());
                }
            }
            Ok(PortfolioState::from_trusted(best.1))
        }
        3 => {
            let outer = ((1.0 - 3.0 * floor) / resolution + 1e-9).floor() as usize;
            let mut best = (f64::INFINITY, vec![1.0 / 3.0; 3]);
            for i in 0..=outer {
                let a = floor + i as f64 * resolution;
                let inner = ((1.0 - a - 2.0 * floor) / resolution + 1e-9).floor() as usize;
                let point = |j: usize| {
                    let b = floor + j as f64 * resolution;
                    [a, b, 1.0 - a - b]
                };
                let eval = |j: usize| obj.value(&point(j));
                let (mut lo, mut hi) = (0usize, inner);
                while hi - lo > 2 {
                    let m1 = lo + (hi - lo) / 3;
                    let m2 = hi - (hi - lo) / 3;
                    let (f1, f2) = (eval(m1), eval(m2));
                    if f1 < f2 {
                        hi = m2 - 1;
                    } else if f1 > f2 {
                        lo = m1 + 1;
                    } else {
                        lo = m1;
                        hi = m2;
                    }
                }
                for j in lo..=hi {
                    let v = eval(j);
                    if v < best.0 {
                        best = (v, point(j).to_vec());
                    }
                }
            }
            Ok(PortfolioState::from_trusted(best.1))
        }
        n => Err(SolverError::UnsupportedDimension(n)),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// `0.5 * ||x - c||^2`
    pub(crate) fn quadratic(c: Vec<f64>) -> impl Objective {
        let c1 = c.clone();
        let c2 = c.clone();
        let n = c.len();
        FnObjective {
            value: move |x: &[f64]| 0.5 * x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            gradient: move |x: &[f64]| DVector::from_iterator(n, x.iter().zip(&c1).map(|(a, b)| a - b)),
            hessian: move |_: &[f64]| {
                let _ = &c2;
                DMatrix::identity(n, n)
            },
        }
    }

    fn dims(n: usize, t: usize) -> ProblemDims {
        ProblemDims::new(n, t).unwrap()
    }

    #[test]
    fn interior_minimizer_is_returned() {
        let d = dims(2, 1000);
        let sol = minimize_over_clipped_simplex(&quadratic(vec![0.3, 0.7]), &d.uniform(), &d, &SolverConfig::default())
            .unwrap();
        assert!((sol.x.as_slice()[0] - 0.3).abs() < 1e-9, "{:?}", sol.x);
        assert!((sol.x.as_slice()[1] - 0.7).abs() < 1e-9);
        assert!(sol.kkt_residual <= 10.0 * 1e-10);
    }

    #[test]
    fn projection_onto_the_floor_face() {
        let d = dims(2, 16);
        let sol = minimize_over_clipped_simplex(&quadratic(vec![1.2, -0.2]), &d.uniform(), &d, &SolverConfig::default())
            .unwrap();
        let x = sol.x.as_slice();
        assert!((x[0] - (1.0 - 1.0 / 32.0)).abs() < 1e-9, "{x:?}");
        assert!((x[1] - 1.0 / 32.0).abs() < 1e-9);
        assert!(x[1] >= 1.0 / 32.0 - 1e-12);
        assert!(check_clipped(x, &d).is_ok());
        assert!(sol.final_mu <= 1e-12);
    }

    #[test]
    fn descent_within_each_stage() {
        let d = dims(3, 10);
        let sol = minimize_over_clipped_simplex(
            &quadratic(vec![1.5, -0.4, -0.1]),
            &d.uniform(),
            &d,
            &SolverConfig::default(),
        )
        .unwrap();
        for stage in &sol.stage_values {
            for w in stage.windows(2) {
                assert!(w[1] <= w[0] + 64.0 * f64::EPSILON * w[0].abs().max(1.0), "{stage:?}");
            }
        }
        assert!(sol.value <= quadratic(vec![1.5, -0.4, -0.1]).value(&d.uniform()));
    }

    #[test]
    fn warm_restart_from_solution_is_cheap() {
        let d = dims(3, 10);
        let obj = quadratic(vec![0.9, 0.2, -0.1]);
        let cfg = SolverConfig::default();
        let first = minimize_over_clipped_simplex(&obj, &d.uniform(), &d, &cfg).unwrap();
        let again = minimize_over_clipped_simplex(&obj, first.x.as_slice(), &d, &cfg).unwrap();
        assert!(again.newton_iterations <= 3, "{}", again.newton_iterations);
    }

    #[test]
    fn oracle_matches_quadratic_minimizers() {
        let d = dims(2, 1000);
        let x = grid_search_oracle(&quadratic(vec![0.3, 0.7]), &d, 1e-5).unwrap();
        assert!((x.as_slice()[0] - 0.3).abs() <= 1e-5);
        let d3 = dims(3, 100);
        let x = grid_search_oracle(&quadratic(vec![0.2, 0.5, 0.3]), &d3, 1e-4).unwrap();
        for (a, b) in x.as_slice().iter().zip([0.2, 0.5, 0.3]) {
            assert!((a - b).abs() <= 2e-4, "{x:?}");
        }
    }

    #[test]
    fn oracle_rejects_large_n_and_bad_resolution() {
        let d = dims(4, 100);
        assert_eq!(
            grid_search_oracle(&quadratic(vec![0.25; 4]), &d, 1e-2).unwrap_err(),
            SolverError::UnsupportedDimension(4)
        );
        let d = dims(2, 100);
        assert!(matches!(
            grid_search_oracle(&quadratic(vec![0.5; 2]), &d, 0.0),
            Err(SolverError::InvalidResolution(_))
        ));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let d = dims(2, 16);
        let bad = SolverConfig { barrier_shrink: 1.5, ..SolverConfig::default() };
        assert!(matches!(
            minimize_over_clipped_simplex(&quadratic(vec![0.5; 2]), &d.uniform(), &d, &bad),
            Err(SolverError::InvalidConfig(_))
        ));
        assert!(matches!(
            minimize_over_clipped_simplex(&quadratic(vec![0.5; 2]), &[0.7, 0.7], &d, &SolverConfig::default()),
            Err(SolverError::InvalidWarmStart(_))
        ));
    }

    #[test]
    fn iteration_limit_surfaces_the_last_iterate() {
        let d = dims(2, 16);
        let cfg = SolverConfig { max_newton_iters: 1, ..SolverConfig::default() };
        let err = minimize_over_clipped_simplex(&quadratic(vec![1.2, -0.2]), &d.uniform(), &d, &cfg).unwrap_err();
        assert!(matches!(err, SolverError::MaxIterations { .. }));
        assert_eq!(err.last_iterate().unwrap().len(), 2);
    }
}
