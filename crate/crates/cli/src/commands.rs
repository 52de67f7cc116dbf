use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use erspin_core::fitter::{
    canonical_params, fit_basin_hopping, residuals, synthetic_peaks, FitConfig, FitProblem, FitResult, LocalMinimizer,
    ParamBounds,
};
use erspin_core::io::{self, PeakList, PeaksFile, ScanPeaks};
use erspin_core::peaks::{extract_scan, fibonacci_sphere, plane_circle, ExtractOptions, ScanRecord};
use erspin_core::transitions::{compute_transitions, synthesize_spectrum};
use erspin_core::uncertainty::{run_mcmc, McmcConfig, PosteriorSummary};
use erspin_core::zefoz::{estimate_coherence, find_zefoz, CoherenceEstimate, SearchStats, ZefozPoint, ZefozSearch};
use erspin_core::{FieldVector, Regime, SystemParams, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, inputs, read_document, read_params, read_payload, write_document};
use crate::error::CliError;
use crate::{
    DirectionArgs, ExtractArgs, FitArgs, GenDirectionsArgs, LevelArg, McmcArgs, MinimizerArg, PlotArgs, SimulateArgs,
    ZefozArgs,
};

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::stage(format!("cannot create {}: {e}", dir.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::stage(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::stage(e.to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionSource {
    Spiral { count: usize },
    Plane { plane: String, step_deg: f64 },
    File,
}

pub fn resolve_directions(args: &DirectionArgs) -> Result<(DirectionSource, Vec<Vector3>, Option<PathBuf>), CliError> {
    if let Some(path) = &args.directions {
        let raw: Vec<[f64; 3]> = read_payload(path)?;
        let dirs = raw
            .iter()
            .map(|d| {
                let v = Vector3::from(*d);
                if v.norm() > 0.0 && v.iter().all(|x| x.is_finite()) {
                    Ok(v.normalize())
                } else {
                    Err(CliError::input(format!("{}: zero or non-finite direction", path.display())))
                }
            })
            .collect::<Result<_, _>>()?;
        return Ok((DirectionSource::File, dirs, Some(path.clone())));
    }
    if let Some(plane) = args.plane {
        let step = args.step_deg.unwrap_or(5.0);
        let dirs = plane_circle(plane, step)?;
        let name = serde_json::to_value(plane).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        return Ok((DirectionSource::Plane { plane: name, step_deg: step }, dirs, None));
    }
    let count = args.spiral.unwrap_or(181);
    let dirs = if count == 0 { Vec::new() } else { fibonacci_sphere(count)? };
    Ok((DirectionSource::Spiral { count }, dirs, None))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub directions: DirectionSource,
    #[serde(rename = "field_T")]
    pub field: f64,
    #[serde(rename = "noise_GHz")]
    pub noise: f64,
    pub min_intensity: f64,
    pub seed: u64,
    pub traces: bool,
    pub trace_noise: f64,
    #[serde(rename = "fwhm_GHz")]
    pub fwhm: f64,
    #[serde(rename = "step_GHz")]
    pub step: f64,
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let sys = read_params(&args.params)?;
    let (source, dirs, dir_file) = resolve_directions(&args.dirs)?;
    if !(args.field_t > 0.0 && args.field_t.is_finite()) {
        return Err(CliError::input("field magnitude must be positive"));
    }
    if !(args.noise_ghz >= 0.0 && args.trace_noise >= 0.0) {
        return Err(CliError::input("noise levels must be non-negative"));
    }
    let config = SimulateConfig {
        directions: source,
        field: args.field_t,
        noise: args.noise_ghz,
        min_intensity: args.min_intensity,
        seed: args.seed,
        traces: args.traces,
        trace_noise: args.trace_noise,
        fwhm: args.fwhm_ghz,
        step: args.step_ghz,
    };
    let mut entries = vec![("params", args.params.as_path())];
    if let Some(p) = &dir_file {
        entries.push(("directions", p.as_path()));
    }
    let digests = inputs(&entries)?;
    if dirs.is_empty() {
        log::warn!("no field directions; nothing written");
        return Ok(());
    }
    simulate_with(&sys, &dirs, &config, &digests, &args.out_dir, args.plotdata)
}

pub fn simulate_with(
    sys: &SystemParams,
    dirs: &[Vector3],
    config: &SimulateConfig,
    digests: &BTreeMap<String, String>,
    out_dir: &Path,
    plotdata: bool,
) -> Result<(), CliError> {
    let fields: Vec<FieldVector> = dirs
        .iter()
        .map(|d| FieldVector::along(d, config.field))
        .collect::<Result<_, _>>()?;
    let lists: Vec<PeakList> = fields
        .par_iter()
        .map(|b| Ok(PeakList { field: *b, peaks: compute_transitions(sys, b)? }))
        .collect::<Result<_, erspin_core::Error>>()?;

    let list_dir = out_dir.join("peaklists");
    mkdir(&list_dir)?;
    for (k, list) in lists.iter().enumerate() {
        write_document(&list_dir.join(format!("dir{k:03}.json")), config, digests.clone(), list)?;
    }

    let peaks = synthetic_peaks(sys, dirs, config.field, config.noise, config.min_intensity, config.seed)?;
    write_document(&out_dir.join("peaks.json"), config, digests.clone(), &PeaksFile::from_fit_peaks(&peaks))?;

    if config.traces {
        let scan_dir = out_dir.join("scans");
        mkdir(&scan_dir)?;
        let noise = Normal::new(0.0, config.trace_noise.max(f64::MIN_POSITIVE)).map_err(|e| CliError::input(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        for (k, list) in lists.iter().enumerate() {
            let visible: Vec<_> = list.peaks.iter().filter(|p| p.intensity >= 0.05).cloned().collect();
            let lo = visible.iter().map(|p| p.frequency).fold(f64::INFINITY, f64::min) - 0.5;
            let hi = visible.iter().map(|p| p.frequency).fold(f64::NEG_INFINITY, f64::max) + 0.5;
            let mut trace = synthesize_spectrum(&visible, lo, hi, config.step, config.fwhm)?;
            if config.trace_noise > 0.0 {
                for s in &mut trace.signal {
                    *s += noise.sample(&mut rng);
                }
            }
            let mut scan = ScanRecord::new(format!("scan{k:03}"), list.field, trace)?;
            scan.laser_range = Some((lo, hi));
            io::write_scan(&scan_dir.join(format!("scan{k:03}.csv")), &scan).map_err(|e| CliError::stage(e.to_string()))?;
        }
    }

    if plotdata {
        let mut w = csv_writer(&out_dir.join("fig2.csv"))?;
        w.write_record(["direction", "Bx_T", "By_T", "Bz_T", "f_GHz", "I_rel", "group", "dmI", "gi", "ei"])
            .map_err(csv_err)?;
        for (k, list) in lists.iter().enumerate() {
            let b = list.field.as_array();
            for p in &list.peaks {
                let dmi = serde_json::to_value(p.delta_mi).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                w.write_record([
                    k.to_string(),
                    b[0].to_string(),
                    b[1].to_string(),
                    b[2].to_string(),
                    p.frequency.to_string(),
                    p.intensity.to_string(),
                    p.group.as_str().to_string(),
                    dmi,
                    p.ground_index.to_string(),
                    p.excited_index.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| CliError::stage(e.to_string()))?;
    }
    log::info!("simulated {} directions, {} synthetic peaks", lists.len(), peaks.len());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub options: ExtractOptions,
}

pub fn extract(args: &ExtractArgs) -> Result<(), CliError> {
    let paths = io::scan_paths(&args.input).map_err(|e| CliError::input(e.to_string()))?;
    if paths.is_empty() {
        return Err(CliError::input(format!("no scan CSV files in {}", args.input.display())));
    }
    let options = ExtractOptions {
        min_prominence: args.prominence,
        max_peaks: args.max_peaks,
        ..Default::default()
    };
    let scans: Vec<ScanPeaks> = paths
        .par_iter()
        .map(|p| {
            let scan = io::read_scan(p).map_err(|e| CliError::input(e.to_string()))?;
            let peaks = extract_scan(&scan, &options).map_err(|e| CliError::from(e).with_context(&p.display().to_string()))?;
            Ok(ScanPeaks {
                scan_id: scan.scan_id,
                field: scan.field,
                peaks,
                hints: Vec::new(),
            })
        })
        .collect::<Result<_, CliError>>()?;
    let mut digests = BTreeMap::new();
    for p in &paths {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        digests.insert(format!("scan:{name}"), artifacts::file_digest(p)?);
        digests.insert(format!("sidecar:{name}"), artifacts::file_digest(&io::sidecar_path(p))?);
    }
    let file = PeaksFile { scans };
    log::info!("extracted {} peaks from {} scans", file.n_peaks(), file.scans.len());
    write_document(&args.out, &ExtractConfig { options }, digests, &file)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitRunConfig {
    pub fit: FitConfig,
    pub use_hints: bool,
    pub bounds: ParamBounds,
}

pub fn load_peaks(path: &Path) -> Result<PeaksFile, CliError> {
    if !path.exists() {
        return Err(CliError::input(format!("peaks file {} not found", path.display())));
    }
    read_payload(path)
}

pub fn run_fit(args: &FitArgs) -> Result<FitResult, CliError> {
    let peaks = load_peaks(&args.peaks)?;
    let init = read_params(&args.init)?;
    let bounds = match &args.bounds {
        Some(p) => read_payload::<ParamBounds>(p)?,
        None => ParamBounds::default_around(init.f0),
    };
    let cfg = FitRunConfig {
        fit: FitConfig {
            seed: args.seed,
            phase1_hops: args.phase1_hops,
            phase2_hops: args.hops,
            replicas: args.replicas,
            skip_phase1: args.skip_phase1,
            phase2_minimizer: match args.minimizer {
                MinimizerArg::Lm => LocalMinimizer::LevenbergMarquardt,
                MinimizerArg::Simplex => LocalMinimizer::Simplex,
            },
            stall_hops: args.stall_hops,
            ..Default::default()
        },
        use_hints: args.use_hints,
        bounds,
    };
    let mut entries = vec![("peaks", args.peaks.as_path()), ("init", args.init.as_path())];
    if let Some(b) = &args.bounds {
        entries.push(("bounds", b.as_path()));
    }
    let digests = inputs(&entries)?;
    let problem = FitProblem::new(peaks.fit_peaks(cfg.use_hints), cfg.bounds.clone())?;
    let result = fit_basin_hopping(&problem, &init, &cfg.fit)?;
    log::info!(
        "fit rmsd {:.4} GHz on {} of {} peaks",
        result.rmsd,
        result.n_assigned,
        problem.peaks.len()
    );
    write_document(&args.out, &cfg, digests, &result)?;
    if let Some(plot) = &args.plotdata {
        write_fit_plotdata(plot, &problem, &result)?;
    }
    Ok(result)
}

fn write_fit_plotdata(path: &Path, problem: &FitProblem, result: &FitResult) -> Result<(), CliError> {
    let map = result.assignment_map(problem.peaks.len());
    let res = residuals(&result.params, problem, &map)?;
    let mut w = csv_writer(path)?;
    w.write_record(["scan_id", "Bx_T", "By_T", "Bz_T", "f_meas_GHz", "f_pred_GHz", "residual_GHz", "gi", "ei"])
        .map_err(csv_err)?;
    let mut r = res.iter();
    for (p, a) in problem.peaks.iter().zip(&map) {
        let Some((gi, ei)) = a else { continue };
        let d = *r.next().expect("one residual per assigned peak");
        let b = p.field.as_array();
        w.write_record([
            p.peak.scan_id.clone(),
            b[0].to_string(),
            b[1].to_string(),
            b[2].to_string(),
            p.peak.frequency.to_string(),
            (p.peak.frequency + d).to_string(),
            d.to_string(),
            gi.to_string(),
            ei.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::stage(e.to_string()))
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let result = run_fit(args)?;
    if !result.converged {
        return Err(CliError::NotConverged(format!(
            "final local descent did not converge; result written to {}",
            args.out.display()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McmcRunConfig {
    pub mcmc: McmcConfig,
    pub use_hints: bool,
}

/// Largest acceptable split-chain R̂.
pub const R_HAT_LIMIT: f64 = 1.1;

pub fn run_mcmc_cmd(args: &McmcArgs) -> Result<PosteriorSummary, CliError> {
    let fit_doc = read_document::<FitResult>(&args.fit)?;
    let fit_cfg: FitRunConfig = serde_json::from_value(fit_doc.config.clone())
        .map_err(|e| CliError::input(format!("{}: {e}", args.fit.display())))?;
    let peaks_digest = artifacts::file_digest(&args.peaks)?;
    match fit_doc.provenance.input_digests.get("peaks") {
        Some(d) if *d == peaks_digest => {}
        Some(d) => {
            return Err(CliError::input(format!(
                "peaks file digest {peaks_digest} does not match the one recorded by the fit ({d})"
            )))
        }
        None => return Err(CliError::input("fit result records no peaks digest")),
    }
    let peaks = load_peaks(&args.peaks)?;
    let problem = FitProblem::new(peaks.fit_peaks(fit_cfg.use_hints), fit_cfg.bounds.clone())?;
    let burn_in = args.burn_in.unwrap_or(args.length / 10);
    let cfg = McmcRunConfig {
        mcmc: McmcConfig {
            chains: args.chains,
            length: args.length,
            burn_in,
            seed: args.seed,
            sigma: args.sigma_ghz,
            thin: args.thin,
            ..Default::default()
        },
        use_hints: fit_cfg.use_hints,
    };
    cfg.mcmc.validate()?;
    let result = &fit_doc.data;
    let map = result.assignment_map(problem.peaks.len());
    let out = run_mcmc(&problem, &result.params, &map, &cfg.mcmc)?;
    let digests = inputs(&[("fit", args.fit.as_path()), ("peaks", args.peaks.as_path())])?;
    write_document(&args.out, &cfg, digests, &out.summary)?;
    if let Some(path) = &args.samples_csv {
        let mut w = csv_writer(path)?;
        let mut header = vec!["chain".to_string(), "sample".to_string()];
        header.extend(out.summary.names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (c, chain) in out.chains.iter().enumerate() {
            for (k, s) in chain.samples.iter().enumerate() {
                let mut row = vec![c.to_string(), k.to_string()];
                row.extend(s.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| CliError::stage(e.to_string()))?;
    }
    Ok(out.summary)
}

pub fn mcmc(args: &McmcArgs) -> Result<(), CliError> {
    let s = run_mcmc_cmd(args)?;
    let worst = s.r_hat.iter().copied().fold(0.0, f64::max);
    if !(worst <= R_HAT_LIMIT) {
        return Err(CliError::NotConverged(format!(
            "max split R-hat {worst:.3} exceeds {R_HAT_LIMIT}; summary written to {}",
            args.out.display()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZefozRunConfig {
    pub level: LevelArg,
    pub search: ZefozSearch,
    #[serde(rename = "deltaB_mT")]
    pub delta_b_mt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZefozEntry {
    pub point: ZefozPoint,
    pub coherence: CoherenceEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZefozReport {
    pub points: Vec<ZefozEntry>,
    pub stats: SearchStats,
    /// Index of the strong-regime point with the smallest |S2_max|.
    pub flattest_strong: Option<usize>,
    pub n_weak: usize,
    pub n_strong: usize,
}

pub fn run_zefoz(args: &ZefozArgs) -> Result<ZefozReport, CliError> {
    let sys = read_params(&args.params)?;
    let cfg = ZefozRunConfig {
        level: args.level,
        search: ZefozSearch {
            b_max: args.bmax,
            radii: args.radii,
            directions: args.directions,
            kappa: args.kappa,
            ..Default::default()
        },
        delta_b_mt: args.delta_b_mt,
    };
    if !(cfg.delta_b_mt > 0.0 && cfg.delta_b_mt.is_finite()) {
        return Err(CliError::input("deltaB must be positive"));
    }
    let level = match cfg.level {
        LevelArg::Z1 => sys.z1,
        LevelArg::Yi => sys.yi,
    };
    let level = canonical_params(&SystemParams { z1: level, yi: level, f0: sys.f0 }).z1;
    let (points, stats) = find_zefoz(&level, &cfg.search)?;
    let points: Vec<ZefozEntry> = points
        .into_iter()
        .map(|p| Ok(ZefozEntry { coherence: estimate_coherence(&p, cfg.delta_b_mt)?, point: p }))
        .collect::<Result<_, erspin_core::Error>>()?;
    let flattest_strong = points
        .iter()
        .enumerate()
        .filter(|(_, e)| e.point.regime == Regime::Strong)
        .min_by(|a, b| a.1.point.s2_max.abs().total_cmp(&b.1.point.s2_max.abs()))
        .map(|(k, _)| k);
    let n_weak = points.iter().filter(|e| e.point.regime == Regime::Weak).count();
    let report = ZefozReport {
        n_strong: points.len() - n_weak,
        n_weak,
        points,
        stats,
        flattest_strong,
    };
    log::info!("{} ZEFOZ points ({} weak, {} strong)", report.points.len(), report.n_weak, report.n_strong);
    let digests = inputs(&[("params", args.params.as_path())])?;
    write_document(&args.out, &cfg, digests, &report)?;
    Ok(report)
}

pub fn zefoz(args: &ZefozArgs) -> Result<(), CliError> {
    run_zefoz(args).map(|_| ())
}

pub fn zefoz_plotdata(args: &PlotArgs) -> Result<(), CliError> {
    let report: ZefozReport = read_document::<ZefozReport>(&args.zefoz)?.data;
    mkdir(&args.out_dir)?;
    let regime = |r: Regime| match r {
        Regime::Weak => "weak",
        Regime::Strong => "strong",
    };
    let mut w = csv_writer(&args.out_dir.join("fig4.csv"))?;
    w.write_record(["B_T", "S2_max_GHz_per_T2", "regime", "i", "j"]).map_err(csv_err)?;
    for e in &report.points {
        let p = &e.point;
        w.write_record([
            p.magnitude().to_string(),
            p.s2_max.to_string(),
            regime(p.regime).to_string(),
            p.pair.0.to_string(),
            p.pair.1.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::stage(e.to_string()))?;
    let mut w = csv_writer(&args.out_dir.join("fig5.csv"))?;
    w.write_record(["Bx_T", "By_T", "Bz_T", "regime", "i", "j"]).map_err(csv_err)?;
    for e in &report.points {
        let p = &e.point;
        let b = p.field.as_array();
        w.write_record([
            b[0].to_string(),
            b[1].to_string(),
            b[2].to_string(),
            regime(p.regime).to_string(),
            p.pair.0.to_string(),
            p.pair.1.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::stage(e.to_string()))
}

pub fn gen_directions(args: &GenDirectionsArgs) -> Result<(), CliError> {
    let (source, dirs, file) = resolve_directions(&args.dirs)?;
    if file.is_some() {
        return Err(CliError::input("gen-directions takes --spiral or --plane"));
    }
    let arrays: Vec<[f64; 3]> = dirs.iter().map(|d| [d.x, d.y, d.z]).collect();
    if arrays.is_empty() {
        log::warn!("empty direction schedule");
    }
    write_document(&args.out, &source, BTreeMap::new(), &arrays)
}
