//! Stage table:
//!
//! | stage | name     | input                        | output          |
//! |-------|----------|------------------------------|-----------------|
//! | 1     | simulate | `--params` (skipped with `--peaks`) | `peaks.json` |
//! | 2     | fit      | peaks, `--init`              | `fit.json`      |
//! | 3     | mcmc     | fit, peaks                   | `posterior.json`|
//! | 4     | zefoz    | fit                          | `zefoz.json`    |
//!
//! A failing stage exits with 2 (bad input) or 3 (stage failure) and names
//! the stage on stderr; later stages are not run. Non-convergence does not
//! halt the run but the final exit code is 4.

use std::path::{Path, PathBuf};

use clap::Args;
use erspin_core::fitter::{canonical_params, pack, PARAM_NAMES};
use erspin_core::peaks::fibonacci_sphere;

use crate::artifacts::{inputs, read_params};
use crate::commands::{self, DirectionSource, SimulateConfig, R_HAT_LIMIT};
use crate::error::CliError;
use crate::{FitArgs, LevelArg, McmcArgs, MinimizerArg, ZefozArgs};

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub work_dir: PathBuf,
    /// Generating parameters for stage 1.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Existing peaks file; skips stage 1.
    #[arg(long)]
    pub peaks: Option<PathBuf>,
    /// Fit start; defaults to `--params`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 181)]
    pub spiral: usize,
    #[arg(long = "field-T", default_value_t = 0.4)]
    pub field_t: f64,
    #[arg(long = "noise-GHz", default_value_t = 0.03)]
    pub noise_ghz: f64,
    #[arg(long, default_value_t = 0.5)]
    pub min_intensity: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub hops: usize,
    #[arg(long, default_value_t = 50)]
    pub phase1_hops: usize,
    #[arg(long)]
    pub stall_hops: Option<usize>,
    #[arg(long)]
    pub use_hints: bool,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 100_000)]
    pub length: usize,
    #[arg(long = "sigma-GHz")]
    pub sigma_ghz: Option<f64>,
    #[arg(long, default_value_t = 5.0)]
    pub bmax: f64,
    #[arg(long, default_value_t = 8)]
    pub radii: usize,
    #[arg(long, default_value_t = 64)]
    pub directions: usize,
    #[arg(long = "deltaB-mT", default_value_t = 0.01)]
    pub delta_b_mt: f64,
    /// Print the stage plan and exit.
    #[arg(long)]
    pub dry_run: bool,
}

struct Plan {
    peaks: PathBuf,
    init: Option<PathBuf>,
    simulate: bool,
    fit: PathBuf,
    posterior: PathBuf,
    zefoz: PathBuf,
}

impl Plan {
    fn new(a: &PipelineArgs) -> Self {
        let w = &a.work_dir;
        Self {
            peaks: a.peaks.clone().unwrap_or_else(|| w.join("peaks.json")),
            init: a.init.clone().or_else(|| a.params.clone()),
            simulate: a.peaks.is_none(),
            fit: w.join("fit.json"),
            posterior: w.join("posterior.json"),
            zefoz: w.join("zefoz.json"),
        }
    }

    fn describe(&self, a: &PipelineArgs) -> Vec<String> {
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<missing>".into());
        vec![
            if self.simulate {
                format!(
                    "stage 1 simulate: {} directions at {} T from {} -> {}",
                    a.spiral,
                    a.field_t,
                    show(&a.params),
                    self.peaks.display()
                )
            } else {
                format!("stage 1 simulate: skipped, using {}", self.peaks.display())
            },
            format!("stage 2 fit: {} + {} -> {}", self.peaks.display(), show(&self.init), self.fit.display()),
            format!("stage 3 mcmc: {} chains x {} -> {}", a.chains, a.length, self.posterior.display()),
            format!("stage 4 zefoz: bmax {} T -> {}", a.bmax, self.zefoz.display()),
        ]
    }
}

fn staged<T>(stage: usize, name: &str, r: Result<T, CliError>) -> Result<T, CliError> {
    r.map_err(|e| e.with_context(&format!("stage {stage} ({name})")))
}

pub fn run(a: &PipelineArgs) -> Result<(), CliError> {
    let plan = Plan::new(a);
    if a.dry_run {
        for line in plan.describe(a) {
            println!("{line}");
        }
        return Ok(());
    }
    std::fs::create_dir_all(&a.work_dir)
        .map_err(|e| CliError::stage(format!("cannot create {}: {e}", a.work_dir.display())))?;
    let mut unconverged = Vec::new();

    if plan.simulate {
        staged(1, "simulate", simulate_stage(a, &plan.peaks))?;
    }

    let init = plan.init.clone();
    let outcome = staged(
        2,
        "fit",
        init.ok_or_else(|| CliError::input("no --init or --params given")).and_then(|init| {
            commands::run_fit(&FitArgs {
                peaks: plan.peaks.clone(),
                init,
                out: plan.fit.clone(),
                seed: a.seed,
                hops: a.hops,
                phase1_hops: a.phase1_hops,
                replicas: 1,
                skip_phase1: false,
                stall_hops: a.stall_hops,
                minimizer: MinimizerArg::Lm,
                use_hints: a.use_hints,
                bounds: None,
                plotdata: Some(a.work_dir.join("fig3.csv")),
            })
        }),
    )?;
    if !outcome.converged {
        unconverged.push("fit".to_string());
    }

    let posterior = staged(
        3,
        "mcmc",
        commands::run_mcmc_cmd(&McmcArgs {
            fit: plan.fit.clone(),
            peaks: plan.peaks.clone(),
            out: plan.posterior.clone(),
            chains: a.chains,
            length: a.length,
            burn_in: None,
            seed: a.seed,
            sigma_ghz: a.sigma_ghz,
            thin: 1,
            samples_csv: None,
        }),
    )?;
    if posterior.r_hat.iter().any(|r| !(*r <= R_HAT_LIMIT)) {
        unconverged.push("mcmc".to_string());
    }

    staged(
        4,
        "zefoz",
        commands::run_zefoz(&ZefozArgs {
            params: plan.fit.clone(),
            out: plan.zefoz.clone(),
            level: LevelArg::Z1,
            bmax: a.bmax,
            delta_b_mt: a.delta_b_mt,
            radii: a.radii,
            directions: a.directions,
            kappa: 3.0,
        }),
    )?;

    if let Some(truth_path) = a.params.as_ref().filter(|_| plan.simulate) {
        let truth = read_params(truth_path)?;
        write_recovery(&a.work_dir.join("recovery.csv"), &truth, &outcome.params)?;
    }

    if unconverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::NotConverged(unconverged.join(", ")))
    }
}

fn simulate_stage(a: &PipelineArgs, peaks_out: &Path) -> Result<(), CliError> {
    let params = a.params.as_ref().ok_or_else(|| CliError::input("stage 1 needs --params or --peaks"))?;
    let sys = read_params(params)?;
    let dirs = fibonacci_sphere(a.spiral)?;
    let config = SimulateConfig {
        directions: DirectionSource::Spiral { count: a.spiral },
        field: a.field_t,
        noise: a.noise_ghz,
        min_intensity: a.min_intensity,
        seed: a.seed,
        traces: false,
        trace_noise: 0.0,
        fwhm: 0.032,
        step: 0.004,
    };
    let digests = inputs(&[("params", params.as_path())])?;
    let dir = peaks_out.parent().unwrap_or(Path::new("."));
    commands::simulate_with(&sys, &dirs, &config, &digests, dir, false)
}

/// Generating vs fitted parameters in the canonical gauge.
fn write_recovery(path: &Path, truth: &erspin_core::SystemParams, fit: &erspin_core::SystemParams) -> Result<(), CliError> {
    let t = pack(&canonical_params(truth));
    let f = pack(&canonical_params(fit));
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::stage(e.to_string()))?;
    w.write_record(["parameter", "true", "fitted", "difference"])
        .map_err(|e| CliError::stage(e.to_string()))?;
    println!("{:<10} {:>14} {:>14} {:>12}", "parameter", "true", "fitted", "difference");
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        println!("{:<10} {:>14.6} {:>14.6} {:>12.6}", name, t[k], f[k], f[k] - t[k]);
        w.write_record([name.to_string(), t[k].to_string(), f[k].to_string(), (f[k] - t[k]).to_string()])
            .map_err(|e| CliError::stage(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::stage(e.to_string()))
}
