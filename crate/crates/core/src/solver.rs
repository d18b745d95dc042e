//! Small dense bound-constrained trust-region minimizer.
//!
//! Steps solve `(H + lambda * D) delta = -g` on the free variables, where `H` is a
//! Gauss-Newton style curvature supplied by the objective and `D` its clamped
//! diagonal (Marquardt scaling). Variables sitting on a bound with the gradient
//! pushing outward are frozen for the step. Only steps that strictly lower the
//! objective are accepted, so the returned value never exceeds the start value.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Linearization {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Row-major `n x n` curvature approximation.
    pub hessian: Vec<f64>,
}

pub(crate) trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn linearize(&self, x: &[f64]) -> Linearization;
}

#[derive(Clone, Debug)]
pub(crate) struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    #[cfg(test)]
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    fn clamp(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SolverOptions {
    pub grad_tol: f64,
    pub max_steps: usize,
    /// Stop once an accepted step lowers the objective by less than
    /// `f_tol * (1 + |f|)`.
    pub f_tol: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct SolveReport {
    pub x: Vec<f64>,
    #[cfg(test)]
    pub value: f64,
    #[cfg(test)]
    pub initial_value: f64,
}

#[derive(Debug)]
pub(crate) struct SolveFailure(pub String);

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e16;
const REL_DECREASE_TOL: f64 = 1e-15;

pub(crate) fn minimize<O: Objective>(
    obj: &O,
    x0: &[f64],
    bounds: &Bounds,
    opts: SolverOptions,
) -> Result<SolveReport, SolveFailure> {
    let n = obj.dim();
    let mut x = x0.to_vec();
    bounds.clamp(&mut x);
    let mut lin = obj.linearize(&x);
    if !lin.value.is_finite() || lin.gradient.iter().any(|g| !g.is_finite()) {
        return Err(SolveFailure(format!(
            "objective is not finite at the starting point (value {})",
            lin.value
        )));
    }
    #[cfg(test)]
    let initial_value = lin.value;
    let mut lambda = LAMBDA_INIT;
    let mut nu = 2.0;
    let mut steps = 0;
    let mut converged = false;

    while steps < opts.max_steps {
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let g = lin.gradient[i];
                !((x[i] <= bounds.lower[i] && g > 0.0) || (x[i] >= bounds.upper[i] && g < 0.0))
            })
            .collect();
        let pg_norm = free.iter().map(|&i| lin.gradient[i].abs()).fold(0.0, f64::max);
        if pg_norm <= opts.grad_tol {
            converged = true;
            break;
        }
        steps += 1;

        let m = free.len();
        let h = DMatrix::from_fn(m, m, |r, c| lin.hessian[free[r] * n + free[c]]);
        let max_diag = (0..m).map(|i| h[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let rhs = DVector::from_fn(m, |r, _| -lin.gradient[free[r]]);

        let mut damped = h.clone();
        for i in 0..m {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12 * max_diag);
        }
        let delta = match damped.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                lambda *= nu;
                nu *= 2.0;
                if lambda > LAMBDA_MAX {
                    break;
                }
                continue;
            }
        };

        let mut trial = x.clone();
        for (k, &i) in free.iter().enumerate() {
            trial[i] += delta[k];
        }
        bounds.clamp(&mut trial);
        let step: Vec<f64> = trial.iter().zip(&x).map(|(t, v)| t - v).collect();
        if step.iter().all(|s| *s == 0.0) {
            converged = true;
            break;
        }

        let mut predicted = 0.0;
        for i in 0..n {
            predicted -= lin.gradient[i] * step[i];
            for j in 0..n {
                predicted -= 0.5 * step[i] * lin.hessian[i * n + j] * step[j];
            }
        }

        let trial_value = obj.value(&trial);
        if trial_value.is_finite() && trial_value < lin.value {
            let decrease = lin.value - trial_value;
            let ratio = if predicted > 0.0 { decrease / predicted } else { 1.0 };
            lambda *= (1.0f64 / 3.0).max(1.0 - (2.0 * ratio - 1.0).powi(3));
            lambda = lambda.max(1e-12);
            nu = 2.0;
            x = trial;
            let previous = lin.value;
            lin = obj.linearize(&x);
            if decrease <= REL_DECREASE_TOL * previous.abs() || decrease <= opts.f_tol * (1.0 + previous.abs()) {
                converged = true;
                break;
            }
        } else {
            lambda *= nu;
            nu *= 2.0;
            if lambda > LAMBDA_MAX {
                break;
            }
        }
    }

    if !converged {
        log::debug!("solver stopped after {steps} steps without meeting its tolerances");
    }
    Ok(SolveReport {
        x,
        #[cfg(test)]
        value: lin.value,
        #[cfg(test)]
        initial_value,
    })
}
