//! `erspin`: simulate → extract → fit → mcmc → zefoz.
//!
//! Exit codes: 0 success, 2 bad input, 3 stage failure, 4 non-convergence
//! (outputs are still written).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod artifacts;
mod commands;
mod error;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use erspin_core::peaks::Plane;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "erspin", version, about = "Spin-Hamiltonian fitting and ZEFOZ search for 167Er3+")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "ERSPIN_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transition lists, synthetic peaks and optional traces per field direction.
    Simulate(SimulateArgs),
    /// Lorentzian peak extraction from every scan in a directory.
    Extract(ExtractArgs),
    /// Two-phase basin-hopping fit of both levels and f0.
    Fit(FitArgs),
    /// Posterior sampling around a fit.
    Mcmc(McmcArgs),
    /// Stationary points of Z1 (or Yi) hyperfine transitions.
    Zefoz(ZefozArgs),
    /// Plot tables from a ZEFOZ result.
    ZefozPlotdata(PlotArgs),
    /// Field-direction schedules.
    GenDirections(GenDirectionsArgs),
    /// All stages in order with artifacts persisted.
    Pipeline(pipeline::PipelineArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DirectionArgs {
    /// Fibonacci spiral with this many directions.
    #[arg(long, conflicts_with_all = ["plane", "directions"])]
    pub spiral: Option<usize>,
    /// Rotate within a crystal plane (XOY, YOZ, ZOX).
    #[arg(long, requires = "step_deg")]
    pub plane: Option<Plane>,
    #[arg(long)]
    pub step_deg: Option<f64>,
    /// JSON list of direction vectors.
    #[arg(long, conflicts_with = "plane")]
    pub directions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub dirs: DirectionArgs,
    #[arg(long = "field-T", default_value_t = 0.4)]
    pub field_t: f64,
    /// Gaussian noise on synthetic peak frequencies.
    #[arg(long = "noise-GHz", default_value_t = 0.0)]
    pub noise_ghz: f64,
    /// Transitions at least this strong become synthetic peaks.
    #[arg(long, default_value_t = 0.5)]
    pub min_intensity: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Also write Lorentzian traces with sidecars under scans/.
    #[arg(long)]
    pub traces: bool,
    #[arg(long = "trace-noise", default_value_t = 0.0)]
    pub trace_noise: f64,
    #[arg(long = "fwhm-GHz", default_value_t = 0.032)]
    pub fwhm_ghz: f64,
    #[arg(long = "step-GHz", default_value_t = 0.004)]
    pub step_ghz: f64,
    /// Write a long-format table of all transitions (fig2.csv).
    #[arg(long)]
    pub plotdata: bool,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub prominence: f64,
    #[arg(long, default_value_t = 30)]
    pub max_peaks: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
pub enum MinimizerArg {
    Lm,
    Simplex,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[arg(long)]
    pub peaks: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Phase-2 hops.
    #[arg(long, default_value_t = 200)]
    pub hops: usize,
    #[arg(long, default_value_t = 50)]
    pub phase1_hops: usize,
    #[arg(long, default_value_t = 1)]
    pub replicas: usize,
    #[arg(long)]
    pub skip_phase1: bool,
    #[arg(long)]
    pub stall_hops: Option<usize>,
    #[arg(long, value_enum, default_value_t = MinimizerArg::Lm)]
    pub minimizer: MinimizerArg,
    /// Pin assignments to the (gi, ei) hints stored with simulated peaks.
    #[arg(long)]
    pub use_hints: bool,
    /// Parameter bounds file; defaults are built around the initial f0.
    #[arg(long)]
    pub bounds: Option<PathBuf>,
    /// Measured vs predicted table (fig3.csv).
    #[arg(long)]
    pub plotdata: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct McmcArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub peaks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 100_000)]
    pub length: usize,
    /// Defaults to a tenth of the length.
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Noise scale; the fit rmsd when absent.
    #[arg(long = "sigma-GHz")]
    pub sigma_ghz: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Stream retained samples to CSV.
    #[arg(long)]
    pub samples_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum LevelArg {
    Z1,
    Yi,
}

#[derive(Args, Debug, Clone)]
pub struct ZefozArgs {
    /// Parameter file or fit result.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = LevelArg::Z1)]
    pub level: LevelArg,
    #[arg(long, default_value_t = 5.0)]
    pub bmax: f64,
    #[arg(long = "deltaB-mT", default_value_t = 0.01)]
    pub delta_b_mt: f64,
    #[arg(long, default_value_t = 8)]
    pub radii: usize,
    #[arg(long, default_value_t = 64)]
    pub directions: usize,
    #[arg(long, default_value_t = 3.0)]
    pub kappa: f64,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub zefoz: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenDirectionsArgs {
    #[command(flatten)]
    pub dirs: DirectionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Fit(a) => commands::fit(&a).map(|_| ()),
        Command::Mcmc(a) => commands::mcmc(&a).map(|_| ()),
        Command::Zefoz(a) => commands::zefoz(&a).map(|_| ()),
        Command::ZefozPlotdata(a) => commands::zefoz_plotdata(&a),
        Command::GenDirections(a) => commands::gen_directions(&a),
        Command::Pipeline(a) => pipeline::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("erspin: {e}");
            e.exit_code()
        }
    }
}
