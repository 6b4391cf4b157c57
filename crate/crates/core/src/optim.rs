//! Dense BFGS with a backtracking Armijo line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence when the gradient infinity norm falls to or below this.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Minimizes `f`, which returns the objective and gradient or `None` when
/// the point is outside the domain (the line search then backtracks).
///
/// The starting point must be inside the domain.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: BfgsOptions) -> Option<Minimum>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut g) = f(&x0)?;
    let initial_value = fx;
    let mut x = x0;
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let gnorm = g.amax();
        if gnorm <= opts.grad_tol {
            return Some(Minimum {
                x,
                value: fx,
                initial_value,
                grad_inf_norm: gnorm,
                iterations,
                converged: true,
            });
        }
        iterations += 1;

        let mut dir = -(&h_inv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h_inv.fill_with_identity();
            dir = -g.clone();
            slope = -g.norm_squared();
            fresh = true;
        }
        // Keep the first trial step modest on a fresh Hessian approximation.
        let mut step = if fresh {
            (1.0 / dir.amax()).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + &dir * step;
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + ARMIJO_C1 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if fresh {
                break;
            }
            h_inv.fill_with_identity();
            fresh = true;
            continue;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                // Scale the identity before the first update.
                h_inv *= sy / y.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
            h_inv -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    let gnorm = g.amax();
    Some(Minimum {
        x,
        value: fx,
        initial_value,
        grad_inf_norm: gnorm,
        iterations,
        converged: gnorm <= opts.grad_tol,
    })
}
