//! Quasi-Newton (BFGS) minimizer with a monotone backtracking line search.
//!
//! Gradients are supplied by the caller; the estimation layer feeds in
//! central finite differences that exploit the sparsity of country-specific
//! parameters.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 600,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub step_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Minimize `f` starting from `x0`. The objective never increases across
/// iterations; the search stops on a small gradient, a small step, or the
/// iteration cap.
pub fn minimize(
    f: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    opts: &BfgsOptions,
) -> BfgsOutcome {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    let mut g = DVector::from_vec(grad(x.as_slice()));
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut step_norm = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        let gnorm = g.norm();
        if gnorm < opts.gradient_tolerance {
            return BfgsOutcome {
                x: x.as_slice().to_vec(),
                objective: fx,
                gradient_norm: gnorm,
                step_norm,
                iterations: iter,
                converged: true,
            };
        }

        let mut direction = -(&h_inv * &g);
        let mut slope = direction.dot(&g);
        if !(slope < 0.0) {
            // curvature information went bad; restart from steepest descent
            h_inv = DMatrix::identity(n, n);
            direction = -g.clone();
            slope = direction.dot(&g);
        }

        // backtracking Armijo line search
        let mut alpha = 1.0;
        let mut x_new = &x + alpha * &direction;
        let mut f_new = f(x_new.as_slice());
        let mut backtracks = 0;
        while !(f_new <= fx + ARMIJO_C1 * alpha * slope) && backtracks < MAX_BACKTRACKS {
            alpha *= 0.5;
            x_new = &x + alpha * &direction;
            f_new = f(x_new.as_slice());
            backtracks += 1;
        }
        if f_new > fx {
            // no descent found along this direction; declare a stall
            return BfgsOutcome {
                x: x.as_slice().to_vec(),
                objective: fx,
                gradient_norm: gnorm,
                step_norm: 0.0,
                iterations: iter,
                converged: step_norm < opts.step_tolerance || gnorm < opts.gradient_tolerance,
            };
        }

        let s = alpha * &direction;
        step_norm = s.norm();
        let g_new = DVector::from_vec(grad(x_new.as_slice()));
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            // BFGS inverse-Hessian update
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H+ = H + (sy + yHy) ss'/sy^2 - (Hy s' + s y'H)/sy
            h_inv = &h_inv + (sy + yhy) * rho * rho * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if step_norm < opts.step_tolerance {
            return BfgsOutcome {
                x: x.as_slice().to_vec(),
                objective: fx,
                gradient_norm: g.norm(),
                step_norm,
                iterations: iter + 1,
                converged: true,
            };
        }
    }
    let gnorm = g.norm();
    BfgsOutcome {
        x: x.as_slice().to_vec(),
        objective: fx,
        gradient_norm: gnorm,
        step_norm,
        iterations,
        converged: gnorm < opts.gradient_tolerance || step_norm < opts.step_tolerance,
    }
}
