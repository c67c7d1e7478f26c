//! Limited-memory BFGS minimizer used by every calibration step.
//!
//! The minimizer is deterministic and monotone: each accepted step lowers the
//! objective, so the returned point never has a higher loss than the start.

use std::collections::VecDeque;

/// A smooth objective with analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    /// Returns the loss at `x` and writes the gradient into `grad`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when one iteration lowers the loss by less than `rel_tol * |loss|`.
    pub rel_tol: f64,
    /// Stop when the gradient infinity norm drops below this.
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iter: 2000,
            rel_tol: 1e-10,
            grad_tol: 1e-12,
        }
    }
}

/// Outcome of a minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimReport {
    pub iterations: usize,
    pub initial_loss: f64,
    pub loss: f64,
    pub converged: bool,
}

impl OptimReport {
    /// Converts a non-converged run into [`crate::Error::Convergence`].
    pub fn strict(self) -> crate::Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(crate::Error::Convergence {
                iterations: self.iterations,
                loss: self.loss,
            })
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `obj` from `x0`.
pub fn minimize<O: Objective + ?Sized>(
    obj: &O,
    x0: &[f64],
    opts: LbfgsOptions,
) -> (Vec<f64>, OptimReport) {
    let n = obj.dim();
    assert_eq!(x0.len(), n, "starting point has wrong dimension");
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&x, &mut g);
    let initial_loss = f;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    if !f.is_finite() {
        return (
            x,
            OptimReport {
                iterations: 0,
                initial_loss,
                loss: f,
                converged: false,
            },
        );
    }

    while iterations < opts.max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= opts.grad_tol || f == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;

        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        } else {
            let gn = dot(&g, &g).sqrt();
            d.iter_mut().for_each(|di| *di /= gn.max(1.0));
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }

        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            let gn = dot(&g, &g).sqrt();
            d.iter_mut().for_each(|di| *di /= gn.max(1.0));
            slope = dot(&g, &d);
        }

        // Backtracking Armijo line search.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_new = obj.eval(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }

        let f_new = match accepted {
            Some(v) => v,
            None => {
                if history.is_empty() {
                    // No descent possible even along the gradient.
                    converged = true;
                    break;
                }
                history.clear();
                continue;
            }
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let decrease = f - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        if decrease <= opts.rel_tol * f.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    if !converged && iterations >= opts.max_iter {
        log::warn!(
            "L-BFGS stopped after {iterations} iterations without meeting tolerance (loss {f:e})"
        );
    }
    (
        x,
        OptimReport {
            iterations,
            initial_loss,
            loss: f,
            converged,
        },
    )
}

/// Central finite-difference gradient, for checking analytic gradients.
pub fn numerical_gradient<O: Objective + ?Sized>(obj: &O, x: &[f64], h: f64) -> Vec<f64> {
    let mut scratch = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = obj.eval(&xp, &mut scratch);
            xp[i] = orig - h;
            let fm = obj.eval(&xp, &mut scratch);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
