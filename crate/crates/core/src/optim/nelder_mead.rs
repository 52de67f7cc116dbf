//! Bounded Nelder–Mead simplex descent with dimension-adaptive coefficients.

use super::{clamp_to, Bounds, LocalResult};

#[derive(Clone, Debug)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of objective values across the simplex is below this.
    pub f_tol: f64,
    /// Stop when every vertex is within this of the best one (per coordinate).
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 20_000,
            f_tol: 1e-6,
            x_tol: 1e-9,
        }
    }
}

/// Minimizes `f` from `x0`; `steps` sets the initial simplex edge per
/// coordinate. A zero step freezes that coordinate.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    steps: &[f64],
    bounds: Option<&Bounds>,
    opts: &NelderMeadOptions,
) -> LocalResult
where
    F: FnMut(&[f64]) -> f64,
{
    let free: Vec<usize> = (0..x0.len()).filter(|&k| steps[k] != 0.0).collect();
    let n = free.len();
    let base = clamp_to(x0, bounds);
    let eval_count = std::cell::Cell::new(0usize);
    let mut eval = |y: &[f64]| -> f64 {
        eval_count.set(eval_count.get() + 1);
        let mut x = base.clone();
        for (i, &k) in free.iter().enumerate() {
            x[k] = y[i];
        }
        let x = clamp_to(&x, bounds);
        let v = f(&x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let embed = |y: &[f64]| {
        let mut x = base.clone();
        for (i, &k) in free.iter().enumerate() {
            x[k] = y[i];
        }
        clamp_to(&x, bounds)
    };

    if n == 0 {
        let v = eval(&[]);
        return LocalResult {
            x: base.clone(),
            f: v,
            evals: 1,
            iterations: 0,
            converged: true,
        };
    }

    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = if n > 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let start: Vec<f64> = free.iter().map(|&k| base[k]).collect();
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for (i, &k) in free.iter().enumerate() {
        let mut v = start.clone();
        v[i] += steps[k];
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while eval_count.get() < opts.max_evals {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let xspread = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= opts.f_tol) || xspread <= opts.x_tol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / nf;
            }
        }
        let toward = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + coef * (c - w))
                .collect()
        };

        let xr = toward(alpha);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = toward(gamma);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = toward(alpha * rho);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = toward(-rho);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[0].clone();
        for i in 1..=n {
            let v: Vec<f64> = best
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + sigma * (x - b))
                .collect();
            values[i] = eval(&v);
            simplex[i] = v;
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    LocalResult {
        x: embed(&simplex[best]),
        f: values[best],
        evals: eval_count.get(),
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        x.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum()
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let opts = NelderMeadOptions {
            max_evals: 20_000,
            f_tol: 1e-14,
            x_tol: 1e-12,
        };
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], &[0.5, 0.5], None, &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn quadratic_in_many_dimensions() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * (v - 0.5).powi(2)).sum::<f64>();
        let x0 = vec![0.0; 8];
        let r = nelder_mead(f, &x0, &[0.3; 8], None, &NelderMeadOptions { f_tol: 1e-12, ..Default::default() });
        assert!(r.f < 1e-8, "f = {}", r.f);
    }

    #[test]
    fn respects_bounds_and_frozen_coordinates() {
        let f = |x: &[f64]| (x[0] - 5.0).powi(2) + (x[1] - 1.0).powi(2);
        let bounds = vec![(-1.0, 2.0), (-10.0, 10.0)];
        let r = nelder_mead(f, &[0.0, 7.0], &[0.5, 0.0], Some(&bounds), &NelderMeadOptions::default());
        assert!((r.x[0] - 2.0).abs() < 1e-4);
        assert_eq!(r.x[1], 7.0);
    }

    #[test]
    fn best_value_never_above_start() {
        let f = |x: &[f64]| (x[0] * 3.0).sin() + x[1] * x[1];
        let x0 = [0.4, -0.3];
        let r = nelder_mead(f, &x0, &[0.2, 0.2], None, &NelderMeadOptions::default());
        assert!(r.f <= f(&x0));
    }
}
