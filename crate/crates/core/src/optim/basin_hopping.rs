//! Basin-hopping: random perturbation, local minimization, Metropolis
//! acceptance at a temperature equal to the current objective value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{clamp_to, Bounds, LocalResult};

#[derive(Clone, Debug)]
pub struct BasinHoppingOptions {
    pub hops: usize,
    /// Half-width of the uniform perturbation per coordinate (0 = frozen).
    pub step_scales: Vec<f64>,
    /// Stop early after this many hops without improving the best value.
    pub stall_hops: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct BasinHoppingResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Best value after the initial descent and after every hop.
    pub best_history: Vec<f64>,
    pub hops: usize,
    pub accepted: usize,
    pub local_failures: usize,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs the hop loop. `local` performs one local minimization from the given
/// start; returning `None` counts as a failed descent.
pub fn basin_hopping<F>(
    x0: &[f64],
    mut local: F,
    bounds: Option<&Bounds>,
    opts: &BasinHoppingOptions,
    rng: &mut ChaCha8Rng,
) -> Option<BasinHoppingResult>
where
    F: FnMut(&[f64]) -> Option<LocalResult>,
{
    let mut evals = 0;
    let mut iterations = 0;
    let mut failures = 0;

    let mut current = match local(x0) {
        Some(r) => r,
        None => {
            failures += 1;
            LocalResult {
                x: clamp_to(x0, bounds),
                f: f64::INFINITY,
                evals: 0,
                iterations: 0,
                converged: false,
            }
        }
    };
    evals += current.evals;
    iterations += current.iterations;
    let mut best = current.clone();
    let mut history = vec![best.f];
    let mut accepted = 0;
    let mut stall = 0;
    let mut hops = 0;

    for _ in 0..opts.hops {
        hops += 1;
        let trial: Vec<f64> = current
            .x
            .iter()
            .zip(&opts.step_scales)
            .map(|(x, &s)| if s > 0.0 { x + rng.random_range(-s..=s) } else { *x })
            .collect();
        let trial = clamp_to(&trial, bounds);
        let u: f64 = rng.random();
        match local(&trial) {
            Some(r) => {
                evals += r.evals;
                iterations += r.iterations;
                let accept = if r.f <= current.f {
                    true
                } else if current.f > 0.0 && current.f.is_finite() {
                    u < (-(r.f - current.f) / current.f).exp()
                } else {
                    false
                };
                if r.f < best.f {
                    best = r.clone();
                    stall = 0;
                } else {
                    stall += 1;
                }
                if accept {
                    accepted += 1;
                    current = r;
                }
            }
            None => {
                failures += 1;
                stall += 1;
            }
        }
        history.push(best.f);
        if opts.stall_hops.is_some_and(|s| stall >= s) {
            break;
        }
    }

    if !best.f.is_finite() {
        return None;
    }
    Some(BasinHoppingResult {
        x: best.x,
        f: best.f,
        best_history: history,
        hops,
        accepted,
        local_failures: failures,
        evals,
        iterations,
        converged: best.converged,
    })
}
