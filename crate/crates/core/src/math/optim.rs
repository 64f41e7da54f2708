//! Quasi-Newton minimization with finite-difference gradients.
//!
//! The objectives this crate optimizes (profile marginal likelihoods over a
//! handful of internal-scale hyperparameters) are smooth but expensive and
//! have no analytic gradients, so BFGS with forward-difference gradients and
//! a backtracking Armijo line search is the workhorse. The implementation
//! tracks the best point seen so a caller can report it even on
//! non-convergence.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the gradient.
    pub gradient_tolerance: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
    /// Stop when the line search cannot move farther than this.
    pub step_tolerance: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iterations: 100,
            gradient_tolerance: 1e-3,
            fd_step: 1e-4,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Central-difference gradient, falling back to a one-sided difference when
/// the opposite side is infeasible (non-finite).
fn fd_gradient(
    f: &mut dyn FnMut(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    fx: f64,
    rel_step: f64,
    evals: &mut usize,
) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = rel_step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        *evals += 2;
        g[j] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) => (fp - fx) / h,
            (false, true) => (fx - fm) / h,
            (false, false) => 0.0,
        };
    }
    g
}

/// Minimize `f` starting from `x0`. `f` may return non-finite values away
/// from the feasible region; the line search backtracks over them.
pub fn bfgs_minimize(
    f: &mut dyn FnMut(&DVector<f64>) -> f64,
    x0: DVector<f64>,
    opts: &BfgsOptions,
) -> BfgsOutcome {
    let n = x0.len();
    let mut evals = 0usize;
    let mut x = x0;
    let mut fx = f(&x);
    evals += 1;
    if !fx.is_finite() {
        return BfgsOutcome {
            x,
            value: fx,
            gradient_norm: f64::INFINITY,
            iterations: 0,
            evaluations: evals,
            converged: false,
        };
    }
    let mut g = fd_gradient(f, &x, fx, opts.fd_step, &mut evals);
    let mut h_inv: DMatrix<f64> = DMatrix::identity(n, n);
    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut iterations = 0;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        let g_norm = g.amax();
        if g_norm < opts.gradient_tolerance {
            return BfgsOutcome {
                x,
                value: fx,
                gradient_norm: g_norm,
                iterations: iter,
                evaluations: evals,
                converged: true,
            };
        }

        let mut direction = -(&h_inv * &g);
        let mut slope = direction.dot(&g);
        if !(slope < 0.0) || !slope.is_finite() {
            // Curvature information went bad; restart from steepest descent.
            h_inv = DMatrix::identity(n, n);
            direction = -g.clone();
            slope = direction.dot(&g);
            if slope == 0.0 {
                break;
            }
        }

        // Backtracking Armijo line search.
        let mut t = 1.0;
        let mut x_new = &x + &direction * t;
        let mut f_new = f(&x_new);
        evals += 1;
        let mut backtracks = 0;
        while !(f_new.is_finite() && f_new <= fx + 1e-4 * t * slope) {
            t *= 0.5;
            backtracks += 1;
            if backtracks > 40 {
                break;
            }
            x_new = &x + &direction * t;
            f_new = f(&x_new);
            evals += 1;
        }
        if backtracks > 40 || !f_new.is_finite() {
            // Could not make progress along this direction.
            let g_norm = g.amax();
            return BfgsOutcome {
                x: best_x,
                value: best_f,
                gradient_norm: g_norm,
                iterations: iter + 1,
                evaluations: evals,
                converged: g_norm < opts.gradient_tolerance,
            };
        }

        let step = &x_new - &x;
        if step.amax() < opts.step_tolerance {
            x = x_new;
            fx = f_new;
            break;
        }

        let g_new = fd_gradient(f, &x_new, f_new, opts.fd_step, &mut evals);
        let y = &g_new - &g;
        let sy = step.dot(&y);
        if sy > 1e-10 * step.norm() * y.norm() {
            if iter == 0 {
                // Scale the initial inverse Hessian to the first curvature.
                let scale = sy / y.dot(&y);
                if scale.is_finite() && scale > 0.0 {
                    h_inv = DMatrix::identity(n, n) * scale;
                }
            }
            // BFGS inverse update: H <- (I - r s y')H(I - r y s') + r s s'.
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H += r^2 (y'Hy) s s' + r s s' - r (s (Hy)' + Hy s')
            for i in 0..n {
                for j in 0..n {
                    h_inv[(i, j)] += rho * rho * yhy * step[i] * step[j]
                        + rho * step[i] * step[j]
                        - rho * (step[i] * hy[j] + hy[i] * step[j]);
                }
            }
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
        }
    }

    let g_norm = g.amax();
    BfgsOutcome {
        converged: g_norm < opts.gradient_tolerance,
        x,
        value: fx,
        gradient_norm: g_norm,
        iterations,
        evaluations: evals,
    }
}

/// Central-difference Hessian of `f` at `x` (used for hyperparameter
/// curvature at the optimum).
pub fn fd_hessian(
    f: &mut dyn FnMut(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let fx = f(x);
    let mut xp = x.clone();
    // Diagonal terms.
    let steps: Vec<f64> = (0..n).map(|j| step * x[j].abs().max(1.0)).collect();
    for j in 0..n {
        xp[j] = x[j] + steps[j];
        let fp = f(&xp);
        xp[j] = x[j] - steps[j];
        let fm = f(&xp);
        xp[j] = x[j];
        h[(j, j)] = (fp - 2.0 * fx + fm) / (steps[j] * steps[j]);
    }
    // Off-diagonal terms.
    for j in 0..n {
        for k in (j + 1)..n {
            xp[j] = x[j] + steps[j];
            xp[k] = x[k] + steps[k];
            let fpp = f(&xp);
            xp[k] = x[k] - steps[k];
            let fpm = f(&xp);
            xp[j] = x[j] - steps[j];
            let fmm = f(&xp);
            xp[k] = x[k] + steps[k];
            let fmp = f(&xp);
            xp[j] = x[j];
            xp[k] = x[k];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * steps[j] * steps[k]);
            h[(j, k)] = v;
            h[(k, j)] = v;
        }
    }
    h
}
