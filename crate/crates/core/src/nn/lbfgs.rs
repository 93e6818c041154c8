//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! [`lbfgs_minimize_batch`] runs many independent problems in lockstep so
//! that each round of trial points can be evaluated by one batched call.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub history: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per backtrack.
    pub backtrack: f64,
    pub grad_tol: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iters: 20, history: 10, c1: 1e-4, backtrack: 0.5, grad_tol: 1e-8, max_backtracks: 30 }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::InvalidArgument(format!("Armijo constant {} not in (0, 1)", self.c1)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "backtracking factor {} not in (0, 1)",
                self.backtrack
            )));
        }
        if self.history == 0 {
            return Err(Error::InvalidArgument("history size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Set when the line search gave up; `point` is the best iterate so far.
    pub line_search_failed: bool,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
}

struct Problem {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    iterations: usize,
    trace: Vec<f64>,
    failed: bool,
    done: bool,
    // per-iteration line-search scratch
    direction: Vec<f64>,
    slope: f64,
    step: f64,
}

impl Problem {
    fn direction(&mut self) {
        let mut q: Vec<f64> = self.g.clone();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&self.g, &q);
        if !(slope < 0.0) || !slope.is_finite() {
            self.history.clear();
            q = self.g.iter().map(|v| -v).collect();
            slope = -dot(&self.g, &self.g);
        }
        self.direction = q;
        self.slope = slope;
        self.step = 1.0;
    }

    fn trial(&self) -> Vec<f64> {
        self.x.iter().zip(&self.direction).map(|(x, d)| x + self.step * d).collect()
    }

    fn accept(&mut self, x: Vec<f64>, f: f64, g: Vec<f64>, history: usize) {
        let s: Vec<f64> = x.iter().zip(&self.x).map(|(a, b)| a - b).collect();
        let mut y: Vec<f64> = g.iter().zip(&self.g).map(|(a, b)| a - b).collect();
        let mut sy = dot(&s, &y);
        // Powell damping against the scaled-identity Hessian estimate keeps
        // curvature pairs positive without a Wolfe line search.
        let gamma = match self.history.back() {
            Some((ps, py, _)) => dot(ps, py) / dot(py, py),
            None => 1.0,
        };
        let sbs = dot(&s, &s) / gamma;
        if sy < 0.2 * sbs {
            let theta = 0.8 * sbs / (sbs - sy);
            for (yi, si) in y.iter_mut().zip(&s) {
                *yi = theta * *yi + (1.0 - theta) * si / gamma;
            }
            sy = dot(&s, &y);
        }
        if sy > 0.0 && sy.is_finite() {
            if self.history.len() == history {
                self.history.pop_front();
            }
            self.history.push_back((s, y, 1.0 / sy));
        }
        self.x = x;
        self.f = f;
        self.g = g;
        self.iterations += 1;
        self.trace.push(f);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes one smooth objective `f(y) -> (value, gradient)` from `y0`.
pub fn lbfgs_minimize<F>(mut f: F, y0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut out = lbfgs_minimize_batch(
        |_, points| {
            let mut values = Vec::with_capacity(points.len());
            let mut grads = Vec::with_capacity(points.len());
            for p in points {
                let (v, g) = f(p);
                values.push(v);
                grads.push(g);
            }
            (values, grads)
        },
        vec![y0.to_vec()],
        cfg,
    )?;
    Ok(out.remove(0))
}

/// Minimizes independent problems in lockstep. `f(ids, points)` returns the
/// value and gradient of problem `ids[k]` at `points[k]`. Non-finite trial
/// values count as failed decrease.
pub fn lbfgs_minimize_batch<F>(mut f: F, starts: Vec<Vec<f64>>, cfg: &LbfgsConfig) -> Result<Vec<LbfgsOutcome>>
where
    F: FnMut(&[usize], &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>),
{
    cfg.validate()?;
    let ids: Vec<usize> = (0..starts.len()).collect();
    let (values, grads) = f(&ids, &starts);
    let mut problems = Vec::with_capacity(starts.len());
    for (i, ((x, fx), g)) in starts.into_iter().zip(values).zip(grads).enumerate() {
        if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("objective {i} is not finite at its starting point")));
        }
        problems.push(Problem {
            x,
            trace: vec![fx],
            f: fx,
            g,
            history: VecDeque::new(),
            iterations: 0,
            failed: false,
            done: false,
            direction: Vec::new(),
            slope: 0.0,
            step: 1.0,
        });
    }

    loop {
        let mut searching = Vec::new();
        for (i, p) in problems.iter_mut().enumerate() {
            if p.done {
                continue;
            }
            if p.iterations >= cfg.max_iters || norm(&p.g) < cfg.grad_tol {
                p.done = true;
                continue;
            }
            p.direction();
            searching.push(i);
        }
        if searching.is_empty() {
            break;
        }

        for attempt in 0..=cfg.max_backtracks {
            if searching.is_empty() {
                break;
            }
            let trials: Vec<Vec<f64>> = searching.iter().map(|&i| problems[i].trial()).collect();
            let (values, grads) = f(&searching, &trials);
            let mut still = Vec::new();
            for (&i, (trial, (ft, gt))) in searching.iter().zip(trials.into_iter().zip(values.into_iter().zip(grads))) {
                let p = &mut problems[i];
                let armijo = p.f + cfg.c1 * p.step * p.slope;
                let ok = ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= armijo;
                if ok {
                    p.accept(trial, ft, gt, cfg.history);
                } else if attempt == cfg.max_backtracks {
                    p.failed = true;
                    p.done = true;
                } else {
                    p.step *= cfg.backtrack;
                    still.push(i);
                }
            }
            searching = still;
        }
    }

    Ok(problems
        .into_iter()
        .map(|p| LbfgsOutcome {
            point: p.x,
            value: p.f,
            iterations: p.iterations,
            line_search_failed: p.failed,
            trace: p.trace,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(p: &[f64]) -> (f64, Vec<f64>) {
        let (x, y) = (p[0], p[1]);
        let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
        let gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x);
        let gy = 200.0 * (y - x * x);
        (f, vec![gx, gy])
    }

    #[test]
    fn identity_hessian_quadratic_in_one_step() {
        let b = [3.0, -1.0];
        let f = |y: &[f64]| {
            let r: Vec<f64> = y.iter().zip(&b).map(|(a, b)| a - b).collect();
            (0.5 * dot(&r, &r), r)
        };
        let out = lbfgs_minimize(f, &[0.0, 0.0], &LbfgsConfig::default()).unwrap();
        assert!(out.value < 1e-16);
        assert!(out.iterations <= 2);
        assert_eq!(out.point, vec![3.0, -1.0]);
    }

    /// Plain gradient descent run to convergence locates the same minimizer.
    fn gradient_descent_oracle() -> Vec<f64> {
        let mut p = vec![-1.2, 1.0];
        for _ in 0..2_000_000 {
            let (_, g) = rosenbrock(&p);
            p[0] -= 1e-3 * g[0];
            p[1] -= 1e-3 * g[1];
        }
        p
    }

    #[test]
    fn rosenbrock_converges_to_gradient_descent_minimizer() {
        let cfg = LbfgsConfig { max_iters: 200, ..Default::default() };
        let out = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!(out.value < 1e-8, "f = {}", out.value);
        let oracle = gradient_descent_oracle();
        assert!((out.point[0] - oracle[0]).abs() < 1e-3 && (out.point[1] - oracle[1]).abs() < 1e-3);
        assert!((out.point[0] - 1.0).abs() < 1e-3 && (out.point[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn stationary_start_is_returned_unchanged() {
        let f = |y: &[f64]| (y[0] * y[0], vec![2.0 * y[0]]);
        let out = lbfgs_minimize(f, &[0.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(out.point, vec![0.0]);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn objective_sequence_never_increases() {
        let cfg = LbfgsConfig { max_iters: 200, ..Default::default() };
        for start in [[-1.2, 1.0], [2.0, 2.0], [-0.5, 3.0]] {
            let out = lbfgs_minimize(rosenbrock, &start, &cfg).unwrap();
            assert_eq!(out.trace.len(), out.iterations + 1);
            assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn failing_line_search_is_flagged_not_fatal() {
        // gradient points the wrong way, so no step decreases the value
        let f = |y: &[f64]| (y[0], vec![-1.0]);
        let out = lbfgs_minimize(f, &[0.0], &LbfgsConfig::default()).unwrap();
        assert!(out.line_search_failed);
        assert_eq!(out.point, vec![0.0]);
    }

    #[test]
    fn batch_matches_individual_runs() {
        let starts = vec![vec![-1.2, 1.0], vec![0.5, 0.5], vec![2.0, -1.0]];
        let cfg = LbfgsConfig { max_iters: 40, ..Default::default() };
        let batch = lbfgs_minimize_batch(
            |_, pts| pts.iter().map(|p| rosenbrock(p)).unzip(),
            starts.clone(),
            &cfg,
        )
        .unwrap();
        for (s, b) in starts.iter().zip(&batch) {
            let single = lbfgs_minimize(rosenbrock, s, &cfg).unwrap();
            assert_eq!(&single, b);
        }
    }

    #[test]
    fn bad_constants_are_rejected() {
        let cfg = LbfgsConfig { c1: 1.5, ..Default::default() };
        assert!(lbfgs_minimize(rosenbrock, &[0.0, 0.0], &cfg).is_err());
        let cfg = LbfgsConfig { backtrack: 1.0, ..Default::default() };
        assert!(lbfgs_minimize(rosenbrock, &[0.0, 0.0], &cfg).is_err());
    }
}
