//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use ndarray::Array1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iters: usize,
    /// Stop once `max |g_i|` falls to this value. Zero disables the test.
    pub grad_tol: f64,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iters: 500,
            grad_tol: 1e-6,
            armijo_c1: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Array1<f64>,
    pub value: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// A differentiable objective with an optional fast path for evaluating
/// values along a search ray.
pub trait Objective {
    /// Value and gradient at `x`.
    fn eval(&mut self, x: &Array1<f64>) -> (f64, Array1<f64>);

    /// Called once per iteration before any [`Objective::value_on_ray`].
    fn begin_ray(&mut self, x: &Array1<f64>, d: &Array1<f64>);

    /// Value at `x + t d` for the ray set up by the last `begin_ray`.
    fn value_on_ray(&mut self, t: f64) -> f64;

    /// Directional derivative `g(x + t d) . d`.
    fn slope_on_ray(&mut self, t: f64) -> f64;

    /// Value and gradient at `x + t d`.
    fn finish_ray(&mut self, t: f64) -> (f64, Array1<f64>);
}

/// Adapts a plain value-and-gradient closure.
pub struct FnObjective<F> {
    f: F,
    x: Array1<f64>,
    d: Array1<f64>,
}

impl<F> FnObjective<F>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            x: Array1::zeros(0),
            d: Array1::zeros(0),
        }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    fn eval(&mut self, x: &Array1<f64>) -> (f64, Array1<f64>) {
        (self.f)(x)
    }

    fn begin_ray(&mut self, x: &Array1<f64>, d: &Array1<f64>) {
        self.x = x.clone();
        self.d = d.clone();
    }

    fn value_on_ray(&mut self, t: f64) -> f64 {
        self.finish_ray(t).0
    }

    fn slope_on_ray(&mut self, t: f64) -> f64 {
        self.finish_ray(t).1.dot(&self.d)
    }

    fn finish_ray(&mut self, t: f64) -> (f64, Array1<f64>) {
        let p = &self.x + &(t * &self.d);
        (self.f)(&p)
    }
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient at a point.
pub fn minimize<F>(f: F, x0: Array1<f64>, cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    minimize_objective(&mut FnObjective::new(f), x0, cfg)
}

pub fn minimize_objective<O: Objective>(obj: &mut O, x0: Array1<f64>, cfg: &LbfgsConfig) -> LbfgsResult {
    let mut x = x0;
    let (mut fx, mut g) = obj.eval(&x);
    let mut memory: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut iterations = 0;
    let mut gnorm = inf_norm(&g);

    while iterations < cfg.max_iters {
        if gnorm <= cfg.grad_tol {
            break;
        }

        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * s.dot(&q);
            q.scaled_add(-a, y);
            alphas.push(a);
        }
        let h0 = match memory.back() {
            Some((s, y, _)) => s.dot(y) / y.dot(y),
            None => 1.0 / g.dot(&g).sqrt().max(1.0),
        };
        q *= h0;
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.scaled_add(a - b, s);
        }
        let mut d = -q;
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            memory.clear();
            d = -&g;
            slope = -g.dot(&g);
        }

        obj.begin_ray(&x, &d);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let ft = obj.value_on_ray(t);
            if ft.is_finite() && ft <= fx + cfg.armijo_c1 * t * slope {
                accepted = Some(obj.finish_ray(t));
                break;
            }
            // Near the optimum the decrease drops below rounding noise in f.
            // The approximate Wolfe test then judges the step by its slope,
            // which stays accurate there.
            if ft.is_finite() && ft <= fx + 1e-12 * fx.abs().max(1.0) {
                let st = obj.slope_on_ray(t);
                if st <= (1.0 - 2.0 * cfg.armijo_c1) * -slope {
                    accepted = Some(obj.finish_ray(t));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((f_new, g_new)) = accepted else {
            if memory.is_empty() {
                break;
            }
            memory.clear();
            continue;
        };

        let s = t * &d;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * y.dot(&y).sqrt() * s.dot(&s).sqrt() && sy > 0.0 {
            if memory.len() == cfg.history {
                memory.pop_front();
            }
            memory.push_back((s.clone(), y, 1.0 / sy));
        }
        x += &s;
        fx = f_new;
        g = g_new;
        gnorm = inf_norm(&g);
        iterations += 1;
    }

    LbfgsResult {
        converged: gnorm <= cfg.grad_tol,
        x,
        value: fx,
        grad_inf_norm: gnorm,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rosenbrock() {
        let f = |x: &Array1<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = array![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let r = minimize(f, array![-1.2, 1.0], &LbfgsConfig::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let scales = Array1::from_iter((0..50).map(|i| 10f64.powf(i as f64 / 25.0)));
        let f = |x: &Array1<f64>| {
            let g = &scales * x - 1.0;
            (0.5 * (&scales * x * x).sum() - x.sum(), g)
        };
        let r = minimize(f, Array1::zeros(50), &LbfgsConfig::default());
        assert!(r.converged, "{r:?}");
        for (xi, si) in r.x.iter().zip(&scales) {
            assert!((xi * si - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_tolerance_runs_full_budget() {
        let f = |x: &Array1<f64>| (0.5 * x.dot(x) + x.sum(), x + 1.0);
        let cfg = LbfgsConfig {
            max_iters: 3,
            grad_tol: 0.0,
            ..Default::default()
        };
        let r = minimize(f, array![5.0, -2.0], &cfg);
        assert!(r.iterations <= 3);
    }
}
