//! Levenberg–Marquardt for bounded nonlinear least squares.
//!
//! Steps are projected onto the box and only accepted when they lower the
//! sum of squares, so the reported objective is monotone.

use nalgebra::{DMatrix, DVector};

use super::{clamp_to, Bounds, LocalResult};

pub trait LeastSquares {
    /// Residual vector, or `None` where the model cannot be evaluated.
    fn residuals(&mut self, x: &[f64]) -> Option<Vec<f64>>;

    /// Residuals together with the Jacobian `∂r_i/∂x_j`.
    fn jacobian(&mut self, x: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)>;
}

#[derive(Clone, Debug)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the RMS residual changes by less than this between steps.
    pub f_tol: f64,
    /// Stop when the scaled step is below this.
    pub x_tol: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            f_tol: 1e-6,
            x_tol: 1e-12,
            lambda0: 1e-3,
        }
    }
}

fn ssr(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn rms(r: &[f64]) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        (ssr(r) / r.len() as f64).sqrt()
    }
}

/// Minimizes `Σ r²`; the returned `f` is the RMS residual. Coordinates with
/// `free[k] == false` never move.
pub fn levenberg_marquardt<P: LeastSquares>(
    problem: &mut P,
    x0: &[f64],
    free: &[bool],
    bounds: Option<&Bounds>,
    opts: &LmOptions,
) -> Option<LocalResult> {
    let n = x0.len();
    let mut x = clamp_to(x0, bounds);
    let (mut r, mut jac) = problem.jacobian(&x)?;
    let mut evals = 1;
    let mut cost = ssr(&r);
    let mut lambda = opts.lambda0;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        for (k, &is_free) in free.iter().enumerate() {
            if !is_free {
                jac.column_mut(k).fill(0.0);
            }
        }
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let dmax = (0..n).map(|k| a[(k, k)]).fold(0.0, f64::max);
        if dmax == 0.0 {
            converged = true;
            break;
        }
        let diag: Vec<f64> = (0..n).map(|k| a[(k, k)].max(1e-12 * dmax)).collect();

        loop {
            let mut m = a.clone();
            for k in 0..n {
                m[(k, k)] += lambda * diag[k];
            }
            let Some(chol) = m.cholesky() else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break 'outer;
                }
                continue;
            };
            let step = chol.solve(&(-&g));
            let trial: Vec<f64> = (0..n)
                .map(|k| if free[k] { x[k] + step[k] } else { x[k] })
                .collect();
            let trial = clamp_to(&trial, bounds);
            let scaled_step = (0..n)
                .map(|k| (trial[k] - x[k]).abs() * diag[k].sqrt())
                .fold(0.0, f64::max);
            evals += 1;
            let accepted = problem
                .residuals(&trial)
                .filter(|rt| ssr(rt) < cost)
                .map(|rt| (rt, trial));
            match accepted {
                Some((rt, xt)) => {
                    let old = rms(&r);
                    let new = rms(&rt);
                    x = xt;
                    cost = ssr(&rt);
                    lambda = (lambda / 10.0).max(1e-12);
                    if (old - new).abs() < opts.f_tol || scaled_step < opts.x_tol {
                        r = rt;
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    lambda *= 10.0;
                    if lambda > 1e16 || scaled_step < opts.x_tol {
                        // no descent direction left: stationary to working precision
                        converged = true;
                        break 'outer;
                    }
                }
            }
        }
        let (rn, jn) = problem.jacobian(&x)?;
        evals += 1;
        r = rn;
        jac = jn;
    }

    Some(LocalResult {
        f: rms(&r),
        x,
        evals,
        iterations,
        converged,
    })
}
