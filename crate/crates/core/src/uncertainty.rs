//! Metropolis–Hastings sampling of the fit posterior.
//!
//! The likelihood is `exp(−Σr²/(2σ²))` with flat priors inside the fit
//! bounds. Proposals are Gaussian with the Laplace covariance `σ²(JᵀJ)⁻¹`
//! at the start point, rescaled during burn-in toward a target acceptance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fitter::{pack, residual_jacobian, residuals, unpack, AssignmentMap, FitProblem, N_PARAMS, PARAM_NAMES};
use crate::transitions::SystemParams;

pub const UNDERESTIMATE_CAVEAT: &str =
    "uncertainties may be underestimated: the model has many free parameters and sigma is fixed at the optimum rmsd";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    /// Steps per chain, burn-in included.
    pub length: usize,
    pub burn_in: usize,
    /// Diagonal proposal widths; the Laplace covariance is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_scales: Option<Vec<f64>>,
    pub seed: u64,
    pub target_acceptance: f64,
    /// Noise scale override (GHz); defaults to the start-point rmsd.
    #[serde(rename = "sigma_GHz", default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Keep every `thin`-th post-burn-in sample.
    pub thin: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            length: 100_000,
            burn_in: 10_000,
            proposal_scales: None,
            seed: 42,
            target_acceptance: 0.25,
            sigma: None,
            thin: 1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.thin == 0 {
            return Err(invalid("chains and thin must be positive"));
        }
        if self.burn_in >= self.length {
            return Err(invalid("burn-in must be shorter than the chain"));
        }
        if !(0.2..=0.5).contains(&self.target_acceptance) {
            return Err(invalid("target acceptance must lie in [0.2, 0.5]"));
        }
        if self.sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(invalid("sigma must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    /// Split-chain potential scale reduction per parameter.
    pub r_hat: Vec<f64>,
    #[serde(rename = "sigma_GHz")]
    pub sigma: f64,
    pub samples_per_chain: usize,
    pub chains: usize,
    pub warnings: Vec<String>,
    pub caveat: String,
}

#[derive(Clone, Debug)]
pub struct Chain {
    /// Retained post-burn-in samples.
    pub samples: Vec<Vec<f64>>,
    pub accepted: usize,
    pub steps: usize,
    /// Acceptance over the post-burn-in part only.
    pub acceptance_rate: f64,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct McmcOutput {
    pub summary: PosteriorSummary,
    pub chains: Vec<Chain>,
}

/// Metropolis rule for a symmetric proposal.
pub fn metropolis_accept(log_current: f64, log_proposed: f64, u: f64) -> bool {
    if log_proposed >= log_current {
        return true;
    }
    if !log_proposed.is_finite() {
        return false;
    }
    u < (log_proposed - log_current).exp()
}

/// Random-walk proposal `x + s·L·z`, `z ~ N(0, I)`.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub chol: DMatrix<f64>,
    pub scale: f64,
}

impl Proposal {
    pub fn diagonal(scales: &[f64]) -> Self {
        Self {
            chol: DMatrix::from_diagonal(&DVector::from_column_slice(scales)),
            scale: 1.0,
        }
    }

    /// From a covariance matrix, with the optimal-scaling factor `2.38/√d`.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Option<Self> {
        let d = cov.nrows() as f64;
        let chol = cov.clone().cholesky()?.l();
        Some(Self {
            chol,
            scale: 2.38 / d.sqrt(),
        })
    }
}

/// One chain of random-walk Metropolis. The proposal scale adapts every 100
/// steps during burn-in and is frozen afterwards.
#[allow(clippy::too_many_arguments)]
pub fn sample_chain<F>(
    log_density: F,
    start: &[f64],
    proposal: &Proposal,
    length: usize,
    burn_in: usize,
    thin: usize,
    target_acceptance: f64,
    rng: &mut ChaCha8Rng,
) -> Chain
where
    F: Fn(&[f64]) -> f64,
{
    let d = start.len();
    let mut x = start.to_vec();
    let mut lp = log_density(&x);
    let mut scale = proposal.scale;
    let mut window_accepts = 0;
    let mut accepted = 0;
    let mut post_accepted = 0;
    let mut samples = Vec::with_capacity((length - burn_in) / thin + 1);
    for step in 0..length {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dx = &proposal.chol * z * scale;
        let y: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + b).collect();
        let lq = log_density(&y);
        let u: f64 = rng.random();
        if metropolis_accept(lp, lq, u) {
            x = y;
            lp = lq;
            accepted += 1;
            window_accepts += 1;
            if step >= burn_in {
                post_accepted += 1;
            }
        }
        if step < burn_in && (step + 1) % 100 == 0 {
            let rate = window_accepts as f64 / 100.0;
            scale *= (2.0 * (rate - target_acceptance)).exp();
            window_accepts = 0;
        }
        if step >= burn_in && (step - burn_in).is_multiple_of(thin) {
            samples.push(x.clone());
        }
    }
    let post = (length - burn_in).max(1);
    Chain {
        samples,
        accepted,
        steps: length,
        acceptance_rate: post_accepted as f64 / post as f64,
        scale,
    }
}

/// Split-chain R̂ for one coordinate.
pub fn split_r_hat(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::new();
    for c in chains {
        let n = c.len() / 2;
        if n < 2 {
            return f64::NAN;
        }
        halves.push(&c[..n]);
        halves.push(&c[c.len() - n..]);
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap() as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var = (n - 1.0) / n * w + b / n;
    (var / w).sqrt()
}

/// Runs independent chains and summarizes them.
pub fn run_chains<F>(
    log_density: F,
    start: &[f64],
    proposal: &Proposal,
    names: &[String],
    sigma: f64,
    config: &McmcConfig,
) -> Result<McmcOutput>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    if !log_density(start).is_finite() {
        return Err(invalid("start point has zero posterior density"));
    }
    let chains: Vec<Chain> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(c as u64);
            sample_chain(
                &log_density,
                start,
                proposal,
                config.length,
                config.burn_in,
                config.thin,
                config.target_acceptance,
                &mut rng,
            )
        })
        .collect();
    let summary = summarize(&chains, names, sigma);
    Ok(McmcOutput { summary, chains })
}

fn summarize(chains: &[Chain], names: &[String], sigma: f64) -> PosteriorSummary {
    let d = names.len();
    let all: Vec<&Vec<f64>> = chains.iter().flat_map(|c| &c.samples).collect();
    let n = all.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| all.iter().map(|s| s[k]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for s in &all {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in i..d {
                cov[i][j] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1.0).max(1.0);
            cov[j][i] = cov[i][j];
        }
    }
    let std: Vec<f64> = (0..d).map(|k| cov[k][k].max(0.0).sqrt()).collect();
    let correlation = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if i == j {
                        1.0
                    } else if std[i] > 0.0 && std[j] > 0.0 {
                        (cov[i][j] / (std[i] * std[j])).clamp(-1.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let r_hat = (0..d)
        .map(|k| {
            let per: Vec<Vec<f64>> = chains.iter().map(|c| c.samples.iter().map(|s| s[k]).collect()).collect();
            split_r_hat(&per)
        })
        .collect();
    let acceptance_rate = chains.iter().map(|c| c.acceptance_rate).sum::<f64>() / chains.len() as f64;
    let mut warnings = Vec::new();
    if !(0.05..=0.8).contains(&acceptance_rate) {
        warnings.push(format!(
            "acceptance rate {acceptance_rate:.3} outside [0.05, 0.8] after adaptation"
        ));
    }
    PosteriorSummary {
        names: names.to_vec(),
        mean,
        std,
        correlation,
        acceptance_rate,
        r_hat,
        sigma,
        samples_per_chain: chains.first().map_or(0, |c| c.samples.len()),
        chains: chains.len(),
        warnings,
        caveat: UNDERESTIMATE_CAVEAT.to_string(),
    }
}

/// `σ²(JᵀJ)⁻¹`, with a small ridge so unidentified directions stay finite.
pub fn laplace_covariance(jac: &DMatrix<f64>, sigma: f64) -> Option<DMatrix<f64>> {
    let mut a = jac.transpose() * jac;
    let dmax = (0..a.nrows()).map(|k| a[(k, k)]).fold(0.0, f64::max);
    if dmax == 0.0 {
        return None;
    }
    for k in 0..a.nrows() {
        a[(k, k)] += 1e-10 * dmax.max(a[(k, k)]);
    }
    a.try_inverse().map(|inv| inv * (sigma * sigma))
}

/// Posterior sampling of all 25 parameters around `start` with fixed
/// assignments.
pub fn run_mcmc(
    problem: &FitProblem,
    start: &SystemParams,
    assignments: &AssignmentMap,
    config: &McmcConfig,
) -> Result<McmcOutput> {
    config.validate()?;
    let x0 = pack(start);
    let (r0, jac) = residual_jacobian(start, problem, assignments)?;
    if r0.is_empty() {
        return Err(crate::error::Error::UndefinedObjective("no assigned peaks".into()));
    }
    let rmsd = crate::fitter::rms(&r0);
    let sigma = config.sigma.unwrap_or(rmsd);
    if !(sigma > 0.0) {
        return Err(invalid("sigma is zero; supply an explicit noise scale"));
    }
    let proposal = match &config.proposal_scales {
        Some(s) if s.len() == N_PARAMS => Proposal::diagonal(s),
        Some(s) => return Err(invalid(format!("expected {N_PARAMS} proposal scales, got {}", s.len()))),
        None => laplace_covariance(&jac, sigma)
            .and_then(|c| Proposal::from_covariance(&c))
            .ok_or_else(|| invalid("Laplace covariance is singular; supply proposal scales"))?,
    };
    let bounds = &problem.bounds.0;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let log_density = |x: &[f64]| {
        if x.iter().zip(bounds).any(|(v, (lo, hi))| v < lo || v > hi) {
            return f64::NEG_INFINITY;
        }
        match residuals(&unpack(x, start), problem, assignments) {
            Ok(r) => -inv2s2 * r.iter().map(|v| v * v).sum::<f64>(),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let names: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
    run_chains(log_density, &x0, &proposal, &names, sigma, config)
}
