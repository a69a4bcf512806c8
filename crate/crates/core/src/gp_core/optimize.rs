//! Limited-memory BFGS with backtracking line search, in the
//! unconstrained log-hyperparameter space.
//!
//! The objective may return `None` to mark a point infeasible (e.g. a
//! covariance matrix that is not positive definite at any jitter level);
//! the line search simply backtracks away from such points.

/// Convergence thresholds and iteration caps.
#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop when the gradient infinity norm drops below this.
    pub grad_tol: f64,
    /// Stop when the relative objective change drops below this.
    pub rel_f_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iters: 500,
            memory: 8,
            grad_tol: 1e-6,
            rel_f_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting value first.
    pub f_history: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 45;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize `objective` starting from `x0`. Returns `None` when the
/// starting point is infeasible or its gradient is not finite.
pub fn minimize<F>(mut objective: F, x0: &[f64], opts: &OptimOptions) -> Option<OptimOutcome>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let mut s_list: Vec<Vec<f64>> = Vec::new();
    let mut y_list: Vec<Vec<f64>> = Vec::new();
    let mut rho_list: Vec<f64> = Vec::new();
    let mut f_history = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    let mut stall_count = 0usize;

    for iter in 0..opts.max_iters {
        iterations = iter;
        if inf_norm(&g) < opts.grad_tol {
            converged = true;
            break;
        }

        // Two-loop recursion for the search direction.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        if !s_list.is_empty() {
            let m = s_list.len();
            let mut alphas = vec![0.0; m];
            for i in (0..m).rev() {
                alphas[i] = rho_list[i] * dot(&s_list[i], &d);
                for k in 0..n {
                    d[k] -= alphas[i] * y_list[i][k];
                }
            }
            let last = m - 1;
            let gamma = dot(&s_list[last], &y_list[last]) / dot(&y_list[last], &y_list[last]);
            for v in d.iter_mut() {
                *v *= gamma;
            }
            for i in 0..m {
                let beta = rho_list[i] * dot(&y_list[i], &d);
                for k in 0..n {
                    d[k] += (alphas[i] - beta) * s_list[i][k];
                }
            }
        }

        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Curvature information went stale; fall back to steepest descent.
            s_list.clear();
            y_list.clear();
            rho_list.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        // Backtracking Armijo line search.
        let mut step = if s_list.is_empty() && iter == 0 {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if let Some((f_trial, g_trial)) = objective(&trial) {
                if f_trial.is_finite()
                    && g_trial.iter().all(|v| v.is_finite())
                    && f_trial <= f + ARMIJO_C1 * step * slope
                {
                    accepted = Some((trial, f_trial, g_trial));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            // No descent step exists at representable step sizes.
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            s_list.push(s);
            y_list.push(y);
            rho_list.push(1.0 / sy);
            if s_list.len() > opts.memory {
                s_list.remove(0);
                y_list.remove(0);
                rho_list.remove(0);
            }
        }

        let f_prev = f;
        x = x_new;
        f = f_new;
        g = g_new;
        f_history.push(f);
        iterations = iter + 1;

        // A single heavily backtracked step can make a spuriously tiny
        // improvement; require the stall to persist before stopping.
        if (f_prev - f).abs() <= opts.rel_f_tol * f_prev.abs().max(1.0) {
            stall_count += 1;
            if stall_count >= 3 {
                converged = true;
                break;
            }
        } else {
            stall_count = 0;
        }
    }

    Some(OptimOutcome {
        x,
        f,
        iterations,
        converged,
        f_history,
    })
}
