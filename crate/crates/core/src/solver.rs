//! Accelerated proximal gradient (FISTA) with backtracking and
//! function-value restart.

use std::time::{Duration, Instant};

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Smallest step size tried before giving up.
pub const MIN_STEP: f64 = 1e-18;

/// A differentiable function of the stacked parameter vector.
pub trait SmoothFunction {
    fn dim(&self) -> usize;

    fn value(&self, theta: ArrayView1<'_, f64>) -> f64;

    fn value_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>);

    /// Upper estimate of the gradient's Lipschitz constant, if cheaply known.
    fn lipschitz_hint(&self, _seed: u64) -> Option<f64> {
        None
    }
}

/// A non-smooth penalty `g` and its proximal map
/// `argmin_z g(z) + |z - v|^2 / (2 step)`.
pub trait Proximal {
    fn prox(&self, v: ArrayView1<'_, f64>, step: f64) -> Result<Array1<f64>>;

    fn penalty(&self, theta: ArrayView1<'_, f64>) -> f64;
}

/// The zero penalty.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPenalty;

impl Proximal for NoPenalty {
    fn prox(&self, v: ArrayView1<'_, f64>, _step: f64) -> Result<Array1<f64>> {
        Ok(v.to_owned())
    }

    fn penalty(&self, _theta: ArrayView1<'_, f64>) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub tol_window: usize,
    pub init_step: Option<f64>,
    pub backtrack_factor: f64,
    pub restart: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 2000,
            rel_tol: 1e-8,
            tol_window: 5,
            init_step: None,
            backtrack_factor: 0.5,
            restart: true,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.tol_window == 0 {
            return Err(Error::invalid("tol_window must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::invalid(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        if let Some(s) = self.init_step {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid(format!("init_step must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Total objective at the starting point followed by one entry per
    /// iteration.
    pub objective_trace: Vec<f64>,
    pub n_iters: usize,
    pub termination: Termination,
    pub backtracks: usize,
    pub restarts: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the starting value")
    }
}

/// Iterate bookkeeping. `t` follows `t' = (1 + sqrt(1 + 4 t^2)) / 2` and is
/// reset to 1 on restart.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub theta: Array1<f64>,
    pub momentum: Array1<f64>,
    pub t: f64,
    pub step: f64,
}

/// `smooth(theta) + penalty(theta)`.
pub fn objective_total(theta: ArrayView1<'_, f64>, smooth: &dyn SmoothFunction, prox: &dyn Proximal) -> f64 {
    smooth.value(theta) + prox.penalty(theta)
}

/// Initial step `1 / L` from the smooth function's Lipschitz estimate, or 1
/// when no positive estimate is available.
pub fn estimate_init_step(smooth: &dyn SmoothFunction, seed: u64) -> f64 {
    match smooth.lipschitz_hint(seed) {
        Some(l) if l.is_finite() && l > 0.0 => 1.0 / l,
        _ => 1.0,
    }
}

struct Candidate {
    theta: Array1<f64>,
    total: f64,
}

struct Stepper<'a> {
    smooth: &'a dyn SmoothFunction,
    prox: &'a dyn Proximal,
    factor: f64,
    backtracks: usize,
}

impl Stepper<'_> {
    /// Proximal gradient step from `y`, shrinking `step` until the smooth
    /// part satisfies the sufficient-decrease condition.
    fn step_from(&mut self, y: &Array1<f64>, step: &mut f64, iteration: usize) -> Result<Candidate> {
        let (fy, gy) = self.smooth.value_grad(y.view());
        if !fy.is_finite() {
            return Err(Error::NonFinite { what: "objective value".into(), iteration });
        }
        if gy.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient".into(), iteration });
        }
        let slack = 1e-14 * fy.abs().max(1.0);
        loop {
            let mut v = y.clone();
            v.scaled_add(-*step, &gy);
            let z = self.prox.prox(v.view(), *step)?;
            let fz = self.smooth.value(z.view());
            let delta = &z - y;
            let bound = fy + gy.dot(&delta) + delta.dot(&delta) / (2.0 * *step);
            if fz.is_finite() && fz <= bound + slack {
                let total = fz + self.prox.penalty(z.view());
                if !total.is_finite() {
                    return Err(Error::NonFinite { what: "penalty value".into(), iteration });
                }
                return Ok(Candidate { theta: z, total });
            }
            *step *= self.factor;
            self.backtracks += 1;
            if *step < MIN_STEP {
                return Err(Error::StepUnderflow { iteration });
            }
        }
    }
}

/// Minimize `smooth + penalty` starting from `theta0`.
pub fn fit(
    smooth: &dyn SmoothFunction,
    prox: &dyn Proximal,
    theta0: ArrayView1<'_, f64>,
    cfg: &SolverConfig,
) -> Result<(Array1<f64>, FitReport)> {
    cfg.validate()?;
    check_dim("initial parameters", smooth.dim(), theta0.len())?;
    let start = Instant::now();
    let mut state = SolverState {
        theta: theta0.to_owned(),
        momentum: theta0.to_owned(),
        t: 1.0,
        step: cfg.init_step.unwrap_or_else(|| estimate_init_step(smooth, cfg.seed)),
    };
    let mut current = objective_total(state.theta.view(), smooth, prox);
    if !current.is_finite() {
        return Err(Error::NonFinite { what: "objective value".into(), iteration: 0 });
    }
    let mut stepper = Stepper { smooth, prox, factor: cfg.backtrack_factor, backtracks: 0 };
    let mut trace = vec![current];
    let mut restarts = 0;
    let mut streak = 0;
    let mut termination = Termination::MaxIters;
    let mut n_iters = 0;

    for k in 1..=cfg.max_iters {
        n_iters = k;
        let mut cand = stepper.step_from(&state.momentum, &mut state.step, k)?;
        if cfg.restart && cand.total > current {
            let momentum_active = state.momentum != state.theta;
            state.t = 1.0;
            state.momentum.assign(&state.theta);
            restarts += 1;
            if momentum_active {
                cand = stepper.step_from(&state.theta, &mut state.step, k)?;
            }
            if cand.total > current {
                cand = Candidate { theta: state.theta.clone(), total: current };
            }
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * state.t * state.t).sqrt());
        let beta = (state.t - 1.0) / t_next;
        let mut momentum = cand.theta.clone();
        Zip::from(&mut momentum)
            .and(&cand.theta)
            .and(&state.theta)
            .for_each(|m, &c, &x| *m += beta * (c - x));
        state.momentum = momentum;
        state.t = t_next;

        let change = (cand.total - current).abs() / current.abs().max(f64::MIN_POSITIVE);
        state.theta = cand.theta;
        current = cand.total;
        trace.push(current);

        streak = if change < cfg.rel_tol { streak + 1 } else { 0 };
        if streak >= cfg.tol_window {
            termination = Termination::Converged;
            break;
        }
    }

    let report = FitReport {
        objective_trace: trace,
        n_iters,
        termination,
        backtracks: stepper.backtracks,
        restarts,
        wall_time: start.elapsed(),
    };
    Ok((state.theta, report))
}

/// One task's contribution to a multitask objective: `weight * smooth(theta[indices])`.
pub struct TaskTerm<'a> {
    pub smooth: &'a dyn SmoothFunction,
    pub weight: f64,
    /// Position in the global parameter vector of each local coordinate.
    pub indices: Vec<usize>,
}

struct WeightedSum<'a> {
    dim: usize,
    terms: &'a [TaskTerm<'a>],
    disjoint: bool,
}

impl WeightedSum<'_> {
    fn gather(&self, term: &TaskTerm<'_>, theta: ArrayView1<'_, f64>) -> Array1<f64> {
        Array1::from_iter(term.indices.iter().map(|&i| theta[i]))
    }
}

impl SmoothFunction for WeightedSum<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: ArrayView1<'_, f64>) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.weight != 0.0)
            .map(|t| t.weight * t.smooth.value(self.gather(t, theta).view()))
            .sum()
    }

    fn value_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        let mut grad = Array1::zeros(self.dim);
        let mut value = 0.0;
        for term in self.terms.iter().filter(|t| t.weight != 0.0) {
            let (v, g) = term.smooth.value_grad(self.gather(term, theta).view());
            value += term.weight * v;
            for (&i, gi) in term.indices.iter().zip(g.iter()) {
                grad[i] += term.weight * gi;
            }
        }
        (value, grad)
    }

    fn lipschitz_hint(&self, seed: u64) -> Option<f64> {
        let mut total: f64 = 0.0;
        for term in self.terms.iter().filter(|t| t.weight != 0.0) {
            let l = term.weight * term.smooth.lipschitz_hint(seed)?;
            total = if self.disjoint { total.max(l) } else { total + l };
        }
        Some(total)
    }
}

/// Minimize `sum_t weight_t * smooth_t(theta[indices_t]) + penalty(theta)`
/// over the concatenated parameter vector.
pub fn fit_multitask(
    terms: &[TaskTerm<'_>],
    prox: &dyn Proximal,
    theta0: ArrayView1<'_, f64>,
    cfg: &SolverConfig,
) -> Result<(Array1<f64>, FitReport)> {
    if terms.is_empty() {
        return Err(Error::invalid("multitask fit needs at least one task"));
    }
    let dim = theta0.len();
    let mut seen = vec![false; dim];
    let mut disjoint = true;
    for (t, term) in terms.iter().enumerate() {
        if !(term.weight.is_finite() && term.weight >= 0.0) {
            return Err(Error::invalid(format!("task {t} weight must be nonnegative, got {}", term.weight)));
        }
        check_dim("task parameter block", term.smooth.dim(), term.indices.len())
            .map_err(|e| e.context(format!("task {t}")))?;
        for &i in &term.indices {
            if i >= dim {
                return Err(Error::invalid(format!("task {t} index {i} exceeds parameter length {dim}")));
            }
            disjoint &= !seen[i];
            seen[i] = true;
        }
    }
    let sum = WeightedSum { dim, terms, disjoint };
    fit(&sum, prox, theta0, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::Rng;

    /// `0.5 |theta - a|^2`.
    struct Quadratic {
        a: Array1<f64>,
    }

    impl SmoothFunction for Quadratic {
        fn dim(&self) -> usize {
            self.a.len()
        }
        fn value(&self, theta: ArrayView1<'_, f64>) -> f64 {
            let r = &theta - &self.a;
            0.5 * r.dot(&r)
        }
        fn value_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
            let r = &theta - &self.a;
            (0.5 * r.dot(&r), r)
        }
        fn lipschitz_hint(&self, _seed: u64) -> Option<f64> {
            Some(1.0)
        }
    }

    /// `|Z theta - y|^2 / (2N)`.
    struct LeastSquares {
        z: Array2<f64>,
        y: Array1<f64>,
    }

    impl SmoothFunction for LeastSquares {
        fn dim(&self) -> usize {
            self.z.ncols()
        }
        fn value(&self, theta: ArrayView1<'_, f64>) -> f64 {
            let r = self.z.dot(&theta) - &self.y;
            r.dot(&r) / (2.0 * self.y.len() as f64)
        }
        fn value_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
            let n = self.y.len() as f64;
            let r = self.z.dot(&theta) - &self.y;
            (r.dot(&r) / (2.0 * n), self.z.t().dot(&r) / n)
        }
    }

    struct L1 {
        lambda: f64,
    }

    impl Proximal for L1 {
        fn prox(&self, v: ArrayView1<'_, f64>, step: f64) -> Result<Array1<f64>> {
            let s = step * self.lambda;
            Ok(v.mapv(|a| a.signum() * (a.abs() - s).max(0.0)))
        }
        fn penalty(&self, theta: ArrayView1<'_, f64>) -> f64 {
            self.lambda * theta.mapv(f64::abs).sum()
        }
    }

    /// Cyclic coordinate descent for the LASSO, run to a fixed point.
    fn lasso_coordinate_descent(z: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> Array1<f64> {
        let n = y.len() as f64;
        let p = z.ncols();
        let mut theta = Array1::<f64>::zeros(p);
        let col_sq: Vec<f64> = (0..p).map(|j| z.column(j).dot(&z.column(j)) / n).collect();
        for _ in 0..100_000 {
            let mut max_move: f64 = 0.0;
            for j in 0..p {
                let r = y - &z.dot(&theta) + &(&z.column(j) * theta[j]);
                let rho = z.column(j).dot(&r) / n;
                let new = rho.signum() * (rho.abs() - lambda).max(0.0) / col_sq[j];
                max_move = max_move.max((new - theta[j]).abs());
                theta[j] = new;
            }
            if max_move < 1e-15 {
                break;
            }
        }
        theta
    }

    fn random_matrix(r: &mut impl Rng, n: usize, p: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, p), |_| r.random_range(-1.0..1.0))
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trace increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn quadratic_reaches_its_center() {
        let q = Quadratic { a: array![1.0, -2.0, 3.5] };
        let (theta, report) = fit(&q, &NoPenalty, Array1::zeros(3).view(), &SolverConfig::default()).unwrap();
        assert!(report.n_iters <= 200);
        assert_eq!(report.termination, Termination::Converged);
        for (t, a) in theta.iter().zip(q.a.iter()) {
            assert_abs_diff_eq!(t, a, epsilon = 1e-8);
        }
    }

    #[test]
    fn lasso_matches_coordinate_descent() {
        let mut r = rng::stream(10);
        for _ in 0..5 {
            let z = random_matrix(&mut r, 10, 5);
            let y = Array1::from_shape_fn(10, |_| r.random_range(-2.0..2.0));
            let ls = LeastSquares { z: z.clone(), y: y.clone() };
            let l1 = L1 { lambda: 0.05 };
            let cfg = SolverConfig { rel_tol: 1e-14, max_iters: 20_000, ..SolverConfig::default() };
            let (theta, report) = fit(&ls, &l1, Array1::zeros(5).view(), &cfg).unwrap();
            assert_monotone(&report.objective_trace);
            let oracle = lasso_coordinate_descent(&z, &y, 0.05);
            let ours = objective_total(theta.view(), &ls, &l1);
            let theirs = objective_total(oracle.view(), &ls, &l1);
            assert!((ours - theirs).abs() <= 1e-6, "{ours} vs {theirs}");
        }
    }

    #[test]
    fn infinite_tolerance_stops_after_the_window() {
        let q = Quadratic { a: array![1.0, 2.0] };
        let cfg = SolverConfig { rel_tol: f64::INFINITY, tol_window: 5, ..SolverConfig::default() };
        let (_, report) = fit(&q, &NoPenalty, Array1::zeros(2).view(), &cfg).unwrap();
        assert_eq!(report.n_iters, 5);
        assert_eq!(report.termination, Termination::Converged);
        assert_eq!(report.objective_trace.len(), 6);
    }

    #[test]
    fn hits_the_iteration_cap() {
        let mut r = rng::stream(3);
        let ls = LeastSquares { z: random_matrix(&mut r, 30, 8), y: Array1::from_elem(30, 1.0) };
        let cfg = SolverConfig { max_iters: 3, init_step: Some(0.01), ..SolverConfig::default() };
        let (_, report) = fit(&ls, &NoPenalty, Array1::zeros(8).view(), &cfg).unwrap();
        assert_eq!(report.termination, Termination::MaxIters);
        assert_eq!(report.n_iters, 3);
    }

    #[test]
    fn traces_are_monotone_and_deterministic() {
        let mut r = rng::stream(4);
        for lambda in [0.0, 0.01, 0.2] {
            let ls = LeastSquares { z: random_matrix(&mut r, 40, 12), y: Array1::from_shape_fn(40, |_| r.random_range(-1.0..1.0)) };
            let l1 = L1 { lambda };
            let cfg = SolverConfig { init_step: Some(50.0), ..SolverConfig::default() };
            let (a, ra) = fit(&ls, &l1, Array1::zeros(12).view(), &cfg).unwrap();
            let (b, rb) = fit(&ls, &l1, Array1::zeros(12).view(), &cfg).unwrap();
            assert_monotone(&ra.objective_trace);
            if lambda == 0.0 {
                assert!(ra.backtracks > 0);
            }
            assert_eq!(a, b);
            assert_eq!(ra.objective_trace, rb.objective_trace);
        }
    }

    struct Poisoned;

    impl SmoothFunction for Poisoned {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, theta: ArrayView1<'_, f64>) -> f64 {
            if theta[0] > 0.5 { f64::NAN } else { 0.5 * (theta[0] - 1.0).powi(2) }
        }
        fn value_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
            (self.value(theta), array![if theta[0] > 0.25 { f64::INFINITY } else { theta[0] - 1.0 }])
        }
    }

    #[test]
    fn reports_non_finite_gradient_with_iteration() {
        let cfg = SolverConfig { init_step: Some(0.3), ..SolverConfig::default() };
        match fit(&Poisoned, &NoPenalty, array![0.0].view(), &cfg) {
            Err(Error::NonFinite { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    /// Gradient with the wrong sign: no step ever satisfies the decrease test.
    struct WrongGradient;

    impl SmoothFunction for WrongGradient {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, theta: ArrayView1<'_, f64>) -> f64 {
            0.5 * theta[0] * theta[0]
        }
        fn value_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
            (self.value(theta), array![-theta[0] - 1e20])
        }
    }

    #[test]
    fn reports_step_underflow() {
        assert!(matches!(
            fit(&WrongGradient, &NoPenalty, array![1.0].view(), &SolverConfig::default()),
            Err(Error::StepUnderflow { iteration: 1 })
        ));
    }

    #[test]
    fn rejects_bad_configs() {
        let q = Quadratic { a: array![0.0] };
        let theta = array![0.0];
        for cfg in [
            SolverConfig { max_iters: 0, ..SolverConfig::default() },
            SolverConfig { rel_tol: 0.0, ..SolverConfig::default() },
            SolverConfig { backtrack_factor: 1.0, ..SolverConfig::default() },
            SolverConfig { init_step: Some(-1.0), ..SolverConfig::default() },
        ] {
            assert!(fit(&q, &NoPenalty, theta.view(), &cfg).is_err());
        }
        assert!(fit(&q, &NoPenalty, array![0.0, 1.0].view(), &SolverConfig::default()).is_err());
    }

    #[test]
    fn objective_total_at_zero() {
        let q = Quadratic { a: array![3.0, 4.0] };
        assert_eq!(objective_total(Array1::zeros(2).view(), &q, &L1 { lambda: 0.0 }), 12.5);
    }

    #[test]
    fn single_task_matches_fit() {
        let mut r = rng::stream(8);
        let ls = LeastSquares { z: random_matrix(&mut r, 25, 6), y: Array1::from_shape_fn(25, |_| r.random_range(-1.0..1.0)) };
        let l1 = L1 { lambda: 0.02 };
        let cfg = SolverConfig::default();
        let (a, ra) = fit(&ls, &l1, Array1::zeros(6).view(), &cfg).unwrap();
        let terms = [TaskTerm { smooth: &ls, weight: 1.0, indices: (0..6).collect() }];
        let (b, rb) = fit_multitask(&terms, &l1, Array1::zeros(6).view(), &cfg).unwrap();
        assert_eq!(ra.n_iters, rb.n_iters);
        for (x, y) in ra.objective_trace.iter().zip(&rb.objective_trace) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_weight_task_stays_at_zero() {
        let q1 = Quadratic { a: array![1.0, 2.0] };
        let q2 = Quadratic { a: array![5.0, -5.0] };
        let terms = [
            TaskTerm { smooth: &q1, weight: 1.0, indices: vec![0, 1] },
            TaskTerm { smooth: &q2, weight: 0.0, indices: vec![2, 3] },
        ];
        let (theta, _) = fit_multitask(&terms, &L1 { lambda: 0.1 }, Array1::zeros(4).view(), &SolverConfig::default()).unwrap();
        assert_eq!(theta[2], 0.0);
        assert_eq!(theta[3], 0.0);
        assert_abs_diff_eq!(theta[0], 0.9, epsilon = 1e-6);
    }

    #[test]
    fn multitask_input_checks() {
        let q = Quadratic { a: array![1.0] };
        let cfg = SolverConfig::default();
        assert!(fit_multitask(&[], &NoPenalty, array![0.0].view(), &cfg).is_err());
        let bad_index = [TaskTerm { smooth: &q, weight: 1.0, indices: vec![3] }];
        assert!(fit_multitask(&bad_index, &NoPenalty, array![0.0].view(), &cfg).is_err());
        let bad_weight = [TaskTerm { smooth: &q, weight: -1.0, indices: vec![0] }];
        assert!(fit_multitask(&bad_weight, &NoPenalty, array![0.0].view(), &cfg).is_err());
    }
}
