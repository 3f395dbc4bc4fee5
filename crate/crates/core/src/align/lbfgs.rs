//! Limited-memory BFGS with a strong-Wolfe line search (bracketing plus
//! cubic-interpolation zoom).

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    /// Stop once `max |grad| < tolerance`.
    pub tolerance: f64,
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iters: 100,
            tolerance: 1e-9,
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    /// No step satisfying the strong Wolfe conditions was found; the best
    /// iterate so far is returned.
    LineSearchFailed,
}

/// One accepted step: `phi(a) = f(x + a d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfeStep {
    pub alpha: f64,
    pub f0: f64,
    pub slope0: f64,
    pub f: f64,
    pub slope: f64,
}

impl WolfeStep {
    pub fn sufficient_decrease(&self, c1: f64) -> bool {
        self.f <= self.f0 + c1 * self.alpha * self.slope0
    }

    pub fn curvature(&self, c2: f64) -> bool {
        self.slope.abs() <= c2 * self.slope0.abs()
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub status: Status,
    pub steps: Vec<WolfeStep>,
    /// Objective at the start and after every accepted step.
    pub values: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Point {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineProblem<'a, F> {
    f: &'a mut F,
    x0: &'a [f64],
    d: &'a [f64],
    evals: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LineProblem<'_, F> {
    fn eval(&mut self, alpha: f64) -> Point {
        self.evals += 1;
        let x: Vec<f64> = self.x0.iter().zip(self.d).map(|(x, d)| x + alpha * d).collect();
        let mut g = vec![0.0; x.len()];
        let f = (self.f)(&x, &mut g);
        let slope = dot(&g, self.d);
        Point { alpha, f, slope, x, g }
    }
}

/// Minimizer of the cubic interpolating two points, or `None` if degenerate.
fn cubic_min(a: &Point, b: &Point) -> Option<f64> {
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    t.is_finite().then_some(t)
}

fn bad(p: &Point) -> bool {
    !p.f.is_finite() || !p.slope.is_finite()
}

fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    prob: &mut LineProblem<F>,
    f0: f64,
    slope0: f64,
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Option<Point> {
    let start = Point {
        alpha: 0.0,
        f: f0,
        slope: slope0,
        x: prob.x0.to_vec(),
        g: Vec::new(),
    };
    let armijo = |p: &Point| p.f <= f0 + cfg.c1 * p.alpha * slope0;
    let mut prev = start;
    let mut alpha = alpha0;
    let mut first = true;
    while prob.evals < cfg.max_line_search {
        let p = prob.eval(alpha);
        if bad(&p) {
            // Overshot into a non-finite region: shrink toward the last good point.
            alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
            continue;
        }
        if !armijo(&p) || (!first && p.f >= prev.f) {
            return zoom(prob, prev, p, f0, slope0, cfg);
        }
        if p.slope.abs() <= -cfg.c2 * slope0 {
            return Some(p);
        }
        if p.slope >= 0.0 {
            return zoom(prob, p, prev, f0, slope0, cfg);
        }
        first = false;
        alpha *= 2.0;
        prev = p;
    }
    None
}

fn zoom<F: FnMut(&[f64], &mut [f64]) -> f64>(
    prob: &mut LineProblem<F>,
    mut lo: Point,
    mut hi: Point,
    f0: f64,
    slope0: f64,
    cfg: &LbfgsConfig,
) -> Option<Point> {
    while prob.evals < cfg.max_line_search {
        let (a, b) = if lo.alpha < hi.alpha { (lo.alpha, hi.alpha) } else { (hi.alpha, lo.alpha) };
        let width = b - a;
        if width <= f64::EPSILON * b.abs().max(1e-300) {
            return None;
        }
        let guess = if bad(&hi) { None } else { cubic_min(&lo, &hi) };
        let alpha = match guess {
            Some(t) => t.clamp(a + 0.1 * width, b - 0.1 * width),
            None => a + 0.5 * width,
        };
        let p = prob.eval(alpha);
        if bad(&p) || p.f > f0 + cfg.c1 * p.alpha * slope0 || p.f >= lo.f {
            hi = p;
            continue;
        }
        if p.slope.abs() <= -cfg.c2 * slope0 {
            return Some(p);
        }
        if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
            hi = lo;
        }
        lo = p;
    }
    None
}

/// Minimize `f`, which writes its gradient into the second argument and
/// returns the value.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if cfg.history == 0 || !(0.0 < cfg.c1 && cfg.c1 < cfg.c2 && cfg.c2 < 1.0) {
        return Err(Error::Validation(format!(
            "invalid L-BFGS settings: history {}, c1 {}, c2 {}",
            cfg.history, cfg.c1, cfg.c2
        )));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("objective or gradient not finite at the starting point".into()));
    }
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut steps = Vec::new();
    let mut values = vec![fx];
    let mut status = Status::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        if inf_norm(&g) < cfg.tolerance {
            status = Status::Converged;
            break;
        }
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = pairs.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope0 = dot(&g, &d);
        if slope0 >= 0.0 || !slope0.is_finite() {
            // Lost descent: restart from steepest descent.
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope0 = dot(&g, &d);
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let mut prob = LineProblem {
            f: &mut f,
            x0: &x,
            d: &d,
            evals: 0,
        };
        let Some(p) = line_search(&mut prob, fx, slope0, alpha0, cfg) else {
            status = Status::LineSearchFailed;
            break;
        };
        steps.push(WolfeStep {
            alpha: p.alpha,
            f0: fx,
            slope0,
            f: p.f,
            slope: p.slope,
        });
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if pairs.len() == cfg.history {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = p.x;
        g = p.g;
        fx = p.f;
        values.push(fx);
        iterations += 1;
    }
    if status == Status::MaxIterations && inf_norm(&g) < cfg.tolerance {
        status = Status::Converged;
    }
    Ok(LbfgsResult {
        grad_inf: inf_norm(&g),
        x,
        f: fx,
        iterations,
        status,
        steps,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn rosenbrock_converges_with_wolfe_steps() {
        let cfg = LbfgsConfig {
            max_iters: 200,
            ..LbfgsConfig::default()
        };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!(r.f < 1e-10, "f = {} after {} iterations ({:?})", r.f, r.iterations, r.status);
        assert!(r.iterations <= 200);
        for s in &r.steps {
            assert!(s.sufficient_decrease(cfg.c1) && s.curvature(cfg.c2), "{s:?}");
        }
        assert!(r.values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_solves_linear_system() {
        // A is SPD, b arbitrary; the optimum is A^-1 b.
        let a = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let b = [1.0, -2.0, 0.5];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..3 {
                let ax: f64 = (0..3).map(|j| a[i][j] * x[j]).sum();
                g[i] = ax - b[i];
                v += 0.5 * x[i] * ax - b[i] * x[i];
            }
            v
        };
        let r = minimize(f, &[0.0; 3], &LbfgsConfig::default()).unwrap();
        let m = nalgebra::Matrix3::from_fn(|i, j| a[i][j]);
        let expect = m.lu().solve(&nalgebra::Vector3::from(b)).unwrap();
        for i in 0..3 {
            assert!((r.x[i] - expect[i]).abs() < 1e-10, "{:?} vs {expect}", r.x);
        }
        assert_eq!(r.status, Status::Converged);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let f = |_: &[f64], g: &mut [f64]| {
            g[0] = f64::NAN;
            0.0
        };
        assert!(minimize(f, &[1.0], &LbfgsConfig::default()).is_err());
    }

    #[test]
    fn unbounded_below_reports_failure_or_limit() {
        // A linear function never satisfies the curvature condition.
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = -1.0;
            -x[0]
        };
        let cfg = LbfgsConfig {
            max_iters: 5,
            ..LbfgsConfig::default()
        };
        let r = minimize(f, &[0.0], &cfg).unwrap();
        assert_eq!(r.status, Status::LineSearchFailed);
        assert!(r.x[0] >= 0.0);
    }
}
