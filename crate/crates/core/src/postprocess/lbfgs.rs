//! Limited-memory BFGS with backtracking Armijo line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsParams {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `‖g‖∞ ≤ g_tol · max(1, |f|)`.
    pub g_tol: f64,
    /// Stop when the relative decrease over one iteration falls below this.
    pub f_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iters: 200,
            g_tol: 1e-7,
            f_tol: 1e-10,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step (starting value first).
    pub trace: Vec<f64>,
    pub line_search_failed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f`; returning `None` marks a point as infeasible, which the
/// line search treats as an infinite objective.
pub fn minimize<F>(mut f: F, x0: &[f64], params: &LbfgsParams) -> Option<LbfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let (mut fx, mut g) = f(x0)?;
    let mut x = x0.to_vec();
    let n = x.len();
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trace = vec![fx];
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;

    for _ in 0..params.max_iters {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm <= params.g_tol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        } else {
            let scale = 1.0 / gnorm.max(1e-12);
            for v in d.iter_mut() {
                *v *= scale.min(1.0);
            }
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v / gnorm.max(1e-12)).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..params.max_backtracks {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if let Some((ft, gt)) = f(&xt) {
                if ft.is_finite() && ft <= fx + params.armijo * step * slope {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            line_search_failed = true;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if hist.len() == params.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        if decrease.abs() <= params.f_tol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Some(LbfgsResult {
        x,
        f: fx,
        iterations,
        converged,
        trace,
        line_search_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((v, g))
        };
        let r = minimize(f, &[-1.2, 1.0], &LbfgsParams { max_iters: 500, ..Default::default() }).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn infeasible_region_is_avoided() {
        // minimum of the quadratic lies in the rejected half-plane
        let f = |x: &[f64]| {
            if x[0] < 0.5 {
                None
            } else {
                Some(((x[0] + 1.0).powi(2), vec![2.0 * (x[0] + 1.0)]))
            }
        };
        let r = minimize(f, &[3.0], &LbfgsParams::default()).unwrap();
        assert!(r.x[0] >= 0.5);
        assert!(r.f < 16.0);
    }
}
