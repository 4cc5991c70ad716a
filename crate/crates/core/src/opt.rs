//! Limited-memory quasi-Newton minimization with backtracking line search.
//!
//! Used by the variational assimilation objectives; kept internal because the
//! public surface of those modules is the assimilation operations themselves.

use crate::error::Error;
use crate::Result;

pub(crate) struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, max_iterations: 200, grad_tol: 1e-8 }
    }
}

pub(crate) struct LbfgsResult {
    pub x: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f` starting from `x0`. `f` evaluates the objective and writes
/// its gradient. The returned trace contains the objective at every accepted
/// iterate (non-increasing).
pub(crate) fn lbfgs<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite { context: "optimizer objective at start".into(), index: None });
    }
    let mut trace = vec![fx];

    // (s, y) difference pairs for the two-loop recursion.
    let mut s_list: Vec<Vec<f64>> = Vec::new();
    let mut y_list: Vec<Vec<f64>> = Vec::new();

    let mut restarted = false;
    let mut iter = 0;
    while iter < opts.max_iterations {
        let gnorm = norm(&g);
        if gnorm <= opts.grad_tol {
            return Ok(LbfgsResult { x, objective_trace: trace, grad_norm: gnorm, iterations: iter, converged: true });
        }

        // Two-loop recursion for the search direction -H g.
        let mut q = g.clone();
        let m = s_list.len();
        let mut alphas = vec![0.0; m];
        for i in (0..m).rev() {
            let rho = 1.0 / dot(&y_list[i], &s_list[i]);
            let alpha = rho * dot(&s_list[i], &q);
            alphas[i] = alpha;
            for (qk, yk) in q.iter_mut().zip(&y_list[i]) {
                *qk -= alpha * yk;
            }
        }
        let gamma = if m > 0 {
            let sy = dot(&s_list[m - 1], &y_list[m - 1]);
            let yy = dot(&y_list[m - 1], &y_list[m - 1]);
            sy / yy
        } else {
            1.0 / gnorm.max(1.0)
        };
        for qk in q.iter_mut() {
            *qk *= gamma;
        }
        for i in 0..m {
            let rho = 1.0 / dot(&y_list[i], &s_list[i]);
            let beta = rho * dot(&y_list[i], &q);
            for (qk, sk) in q.iter_mut().zip(&s_list[i]) {
                *qk += (alphas[i] - beta) * sk;
            }
        }
        let dir: Vec<f64> = q.iter().map(|&v| -v).collect();

        let mut slope = dot(&g, &dir);
        let mut direction = dir;
        if slope >= 0.0 {
            // Curvature information went bad; fall back to steepest descent.
            direction = g.iter().map(|&v| -v / gnorm.max(1.0)).collect();
            slope = dot(&g, &direction);
            s_list.clear();
            y_list.clear();
        }

        // Backtracking Armijo line search.
        let mut step = 1.0;
        let c1 = 1e-4;
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut accepted = false;
        for _ in 0..50 {
            for ((xn, &xi), &di) in x_new.iter_mut().zip(&x).zip(&direction) {
                *xn = xi + step * di;
            }
            let f_new = f(&x_new, &mut g_new)?;
            if f_new.is_finite() && f_new <= fx + c1 * step * slope {
                let s_vec: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y_vec: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                if dot(&s_vec, &y_vec) > 1e-14 {
                    s_list.push(s_vec);
                    y_list.push(y_vec);
                    if s_list.len() > opts.memory {
                        s_list.remove(0);
                        y_list.remove(0);
                    }
                }
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                fx = f_new;
                trace.push(fx);
                accepted = true;
                break;
            }
            step *= 0.5;
        }

        if !accepted {
            if restarted {
                return Err(Error::LineSearch(format!(
                    "no acceptable step at iteration {iter} (gradient norm {gnorm:.3e})"
                )));
            }
            // One restart: drop memory and retry from steepest descent.
            restarted = true;
            s_list.clear();
            y_list.clear();
            iter += 1;
            continue;
        }
        restarted = false;
        iter += 1;
    }

    let gnorm = norm(&g);
    Ok(LbfgsResult {
        x,
        objective_trace: trace,
        grad_norm: gnorm,
        iterations: iter,
        converged: gnorm <= opts.grad_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic_bowl() {
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..x.len() {
                let c = (i + 1) as f64;
                v += 0.5 * c * (x[i] - 1.0) * (x[i] - 1.0);
                g[i] = c * (x[i] - 1.0);
            }
            Ok(v)
        };
        let res = lbfgs(f, &[5.0, -3.0, 0.0], &LbfgsOptions::default()).unwrap();
        assert!(res.converged);
        for xi in res.x {
            assert!((xi - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (1.0, 100.0);
            let v = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            g[0] = -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]);
            g[1] = 2.0 * b * (x[1] - x[0] * x[0]);
            Ok(v)
        };
        let opts = LbfgsOptions { max_iterations: 500, ..Default::default() };
        let res = lbfgs(f, &[-1.2, 1.0], &opts).unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-5, "x = {:?}", res.x);
        assert!((res.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn objective_trace_is_non_increasing() {
        let f = |x: &[f64], g: &mut [f64]| {
            let v = x[0].powi(4) + x[1] * x[1];
            g[0] = 4.0 * x[0].powi(3);
            g[1] = 2.0 * x[1];
            Ok(v)
        };
        let res = lbfgs(f, &[2.0, -2.0], &LbfgsOptions::default()).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
