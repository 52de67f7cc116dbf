//! Peak extraction from spectral scans and field-direction schedules.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim::{levenberg_marquardt, LeastSquares, LmOptions};
use crate::tensor::{FieldVector, Vector3};
use crate::transitions::{lorentzian, SpectrumTrace};

/// One recorded scan at a fixed field.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub scan_id: String,
    pub field: FieldVector,
    pub trace: SpectrumTrace,
    /// Laser sweep range (GHz), when recorded.
    pub laser_range: Option<(f64, f64)>,
}

impl ScanRecord {
    pub fn new(scan_id: impl Into<String>, field: FieldVector, trace: SpectrumTrace) -> Result<Self> {
        if !(field.magnitude() > 0.0) {
            return Err(invalid("scan field must be non-zero"));
        }
        if trace.is_empty() {
            return Err(invalid("scan trace is empty"));
        }
        Ok(Self {
            scan_id: scan_id.into(),
            field,
            trace,
            laser_range: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredPeak {
    #[serde(rename = "f_GHz")]
    pub frequency: f64,
    #[serde(rename = "sigma_GHz")]
    pub frequency_sigma: f64,
    pub height: f64,
    #[serde(rename = "fwhm_GHz")]
    pub fwhm: f64,
    pub scan_id: String,
    /// False when the line-shape fit for this peak did not settle.
    #[serde(default = "yes")]
    pub converged: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    /// Seeding threshold as a fraction of the signal range.
    pub min_prominence: f64,
    pub max_peaks: usize,
    pub max_iterations: usize,
    /// Lower bound on reported centre uncertainties (GHz).
    pub sigma_floor: f64,
    /// Extra peaks seeded from fit residuals, at most this many rounds.
    pub residual_rounds: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            min_prominence: 0.1,
            max_peaks: 30,
            max_iterations: 200,
            sigma_floor: 0.006,
            residual_rounds: 3,
        }
    }
}

/// Extracts peaks with default settings apart from the two seeding knobs.
pub fn extract_peaks(trace: &SpectrumTrace, min_prominence: f64, max_peaks: usize) -> Result<Vec<MeasuredPeak>> {
    extract_peaks_with(
        trace,
        &ExtractOptions {
            min_prominence,
            max_peaks,
            ..Default::default()
        },
    )
}

pub fn extract_scan(scan: &ScanRecord, opts: &ExtractOptions) -> Result<Vec<MeasuredPeak>> {
    let mut peaks = extract_peaks_with(&scan.trace, opts)?;
    for p in &mut peaks {
        p.scan_id = scan.scan_id.clone();
    }
    Ok(peaks)
}

/// Topographic prominence of every strict local maximum, as `(index, prominence)`.
pub fn local_maxima(signal: &[f64]) -> Vec<(usize, f64)> {
    let n = signal.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if signal[i] > signal[i - 1] {
            // walk across a plateau
            let mut j = i;
            while j + 1 < n && signal[j + 1] == signal[i] {
                j += 1;
            }
            if j + 1 < n && signal[j + 1] < signal[i] {
                let peak = (i + j) / 2;
                out.push((peak, prominence(signal, peak)));
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

fn prominence(signal: &[f64], peak: usize) -> f64 {
    let h = signal[peak];
    let mut left_min = h;
    for k in (0..peak).rev() {
        if signal[k] > h {
            break;
        }
        left_min = left_min.min(signal[k]);
    }
    let mut right_min = h;
    for &v in &signal[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Full width at half prominence, linearly interpolated.
fn half_width_estimate(freq: &[f64], signal: &[f64], peak: usize, prom: f64) -> f64 {
    let level = signal[peak] - 0.5 * prom;
    let cross = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = peak;
        for k in range {
            if signal[k] <= level {
                let t = (signal[prev] - level) / (signal[prev] - signal[k]);
                return Some(freq[prev] + t * (freq[k] - freq[prev]));
            }
            prev = k;
        }
        None
    };
    let left = cross(&mut (0..peak).rev());
    let right = cross(&mut (peak + 1..signal.len()));
    match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (freq[peak] - l),
        (None, Some(r)) => 2.0 * (r - freq[peak]),
        (None, None) => 0.0,
    }
}

/// Sum of Lorentzians plus a constant baseline.
/// Parameters: `[baseline, c_0, h_0, w_0, c_1, ...]`.
struct LineShapeModel<'a> {
    freq: &'a [f64],
    signal: &'a [f64],
}

impl LineShapeModel<'_> {
    fn model(&self, x: &[f64], f: f64) -> f64 {
        x[0] + x[1..]
            .chunks_exact(3)
            .map(|p| p[1] * lorentzian(f, p[0], p[2]))
            .sum::<f64>()
    }
}

impl LeastSquares for LineShapeModel<'_> {
    fn residuals(&mut self, x: &[f64]) -> Option<Vec<f64>> {
        Some(
            self.freq
                .iter()
                .zip(self.signal)
                .map(|(&f, &y)| self.model(x, f) - y)
                .collect(),
        )
    }

    fn jacobian(&mut self, x: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let r = self.residuals(x)?;
        let mut j = DMatrix::zeros(self.freq.len(), x.len());
        for (i, &f) in self.freq.iter().enumerate() {
            j[(i, 0)] = 1.0;
            for (k, p) in x[1..].chunks_exact(3).enumerate() {
                let (c, h, w) = (p[0], p[1], p[2]);
                let hw = 0.5 * w;
                let d = f - c;
                let den = d * d + hw * hw;
                let l = hw * hw / den;
                j[(i, 1 + 3 * k)] = h * l * 2.0 * d / den;
                j[(i, 2 + 3 * k)] = l;
                // ∂L/∂w = hw d² / den² (from L = hw²/den)
                j[(i, 3 + 3 * k)] = h * hw * d * d / (den * den);
            }
        }
        Some((r, j))
    }
}

struct Seed {
    center: f64,
    height: f64,
    width: f64,
}

pub fn extract_peaks_with(trace: &SpectrumTrace, opts: &ExtractOptions) -> Result<Vec<MeasuredPeak>> {
    if !(opts.min_prominence > 0.0 && opts.min_prominence < 1.0) {
        return Err(invalid("min_prominence must lie in (0, 1)"));
    }
    let n = trace.len();
    let freq = &trace.frequencies;
    let signal = &trace.signal;
    if n < 3 || opts.max_peaks == 0 {
        return Ok(Vec::new());
    }
    let lo = signal.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = signal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Ok(Vec::new());
    }
    let threshold = opts.min_prominence * range;
    let step = trace.step();
    let span = freq[n - 1] - freq[0];

    let mut maxima: Vec<(usize, f64)> = local_maxima(signal)
        .into_iter()
        .filter(|&(_, p)| p >= threshold)
        .collect();
    maxima.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    maxima.truncate(opts.max_peaks);
    maxima.sort_by_key(|m| m.0);
    if maxima.is_empty() {
        return Ok(Vec::new());
    }

    let mut seeds: Vec<Seed> = maxima
        .iter()
        .map(|&(i, p)| {
            let w = half_width_estimate(freq, signal, i, p);
            Seed {
                center: freq[i],
                height: p,
                width: if w > 0.0 { w } else { 2.0 * step },
            }
        })
        .collect();

    // a line narrower than the grid spacing cannot be told apart from a noise spike
    let min_width = step;
    let max_width = span.max(step);
    let lm = LmOptions {
        max_iterations: opts.max_iterations,
        f_tol: 1e-12 * range,
        x_tol: 1e-14,
        lambda0: 1e-3,
    };

    let mut model = LineShapeModel { freq, signal };
    let fit_seeds = |model: &mut LineShapeModel<'_>, seeds: &[Seed]| {
        let mut x0 = vec![lo];
        let mut bounds = vec![(lo - range, hi)];
        for s in seeds {
            x0.extend([s.center, s.height, s.width.clamp(min_width, max_width)]);
            bounds.extend([(freq[0], freq[n - 1]), (0.0, 2.0 * range), (min_width, max_width)]);
        }
        let free = vec![true; x0.len()];
        levenberg_marquardt(model, &x0, &free, Some(&bounds), &lm)
            .ok_or_else(|| Error::FitFailed("line-shape model not evaluable".into()))
    };

    let mut fit = fit_seeds(&mut model, &seeds)?;
    for _ in 0..opts.residual_rounds {
        if seeds.len() >= opts.max_peaks {
            break;
        }
        let residual: Vec<f64> = freq
            .iter()
            .zip(signal)
            .map(|(&f, &y)| y - model.model(&fit.x, f))
            .collect();
        let ssr: f64 = residual.iter().map(|r| r * r).sum();
        let noise = (ssr / n as f64).sqrt();
        let Some((i, p)) = local_maxima(&residual)
            .into_iter()
            .filter(|&(_, p)| p >= threshold && p >= 4.0 * noise)
            .max_by(|a, b| a.1.total_cmp(&b.1))
        else {
            break;
        };
        let mut trial_seeds: Vec<Seed> = fit.x[1..]
            .chunks_exact(3)
            .map(|q| Seed {
                center: q[0],
                height: q[1],
                width: q[2],
            })
            .collect();
        trial_seeds.push(Seed {
            center: freq[i],
            height: p,
            width: 2.0 * step,
        });
        trial_seeds.sort_by(|a, b| a.center.total_cmp(&b.center));
        let trial = fit_seeds(&mut model, &trial_seeds)?;
        let trial_ssr = (trial.f * trial.f) * n as f64;
        // the extra line must explain far more than three noise degrees of freedom
        let dof = n.saturating_sub(fit.x.len()).max(1) as f64;
        if ssr - trial_ssr > 20.0 * ssr / dof {
            fit = trial;
            seeds = trial_seeds;
        } else {
            break;
        }
    }
    Ok(finish(&mut model, &fit.x, fit.converged, opts, step, (min_width, max_width)))
}

fn finish(
    model: &mut LineShapeModel<'_>,
    x: &[f64],
    converged: bool,
    opts: &ExtractOptions,
    step: f64,
    width_bounds: (f64, f64),
) -> Vec<MeasuredPeak> {
    let (r, j) = model.jacobian(x).expect("line-shape model is total");
    let dof = r.len().saturating_sub(x.len()).max(1) as f64;
    let s2 = r.iter().map(|v| v * v).sum::<f64>() / dof;
    let cov = (j.transpose() * &j).try_inverse();
    let (flo, fhi) = (model.freq[0], model.freq[model.freq.len() - 1]);

    let mut out: Vec<MeasuredPeak> = x[1..]
        .chunks_exact(3)
        .enumerate()
        .filter(|(_, p)| p[1] > 0.0)
        .map(|(k, p)| {
            let var = cov.as_ref().map(|c| s2 * c[(1 + 3 * k, 1 + 3 * k)]);
            let sigma = var.filter(|v| v.is_finite() && *v >= 0.0).map(f64::sqrt);
            let at_bound = p[2] <= width_bounds.0 * (1.0 + 1e-9)
                || p[2] >= width_bounds.1 * (1.0 - 1e-9)
                || p[0] <= flo + 0.5 * step
                || p[0] >= fhi - 0.5 * step;
            MeasuredPeak {
                frequency: p[0],
                frequency_sigma: sigma.unwrap_or(f64::INFINITY).max(opts.sigma_floor),
                height: p[1],
                fwhm: p[2],
                scan_id: String::new(),
                converged: converged && sigma.is_some() && !at_bound,
            }
        })
        .collect();
    out.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plane {
    #[serde(rename = "XOY")]
    Xoy,
    #[serde(rename = "YOZ")]
    Yoz,
    #[serde(rename = "ZOX")]
    Zox,
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "XOY" => Ok(Plane::Xoy),
            "YOZ" => Ok(Plane::Yoz),
            "ZOX" => Ok(Plane::Zox),
            other => Err(invalid(format!("unknown plane {other:?} (expected XOY, YOZ or ZOX)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DirectionSchedule {
    Spiral { count: usize },
    Plane { plane: Plane, step_deg: f64 },
}

pub fn generate_directions(schedule: DirectionSchedule) -> Result<Vec<Vector3>> {
    match schedule {
        DirectionSchedule::Spiral { count } => fibonacci_sphere(count),
        DirectionSchedule::Plane { plane, step_deg } => plane_circle(plane, step_deg),
    }
}

/// Fibonacci lattice with both poles pinned; interior heights
/// `z_i = 1 − 2(i + ½)/N`, longitudes advancing by the golden angle.
pub fn fibonacci_sphere(count: usize) -> Result<Vec<Vector3>> {
    if count < 2 {
        return Err(invalid("spiral needs at least two directions"));
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let nf = count as f64;
    let mut out = Vec::with_capacity(count);
    out.push(Vector3::z());
    for i in 1..count - 1 {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / nf;
        let r = (1.0 - z * z).sqrt();
        let phi = 2.0 * PI * i as f64 / golden;
        out.push(Vector3::new(r * phi.cos(), r * phi.sin(), z).normalize());
    }
    out.push(-Vector3::z());
    Ok(out)
}

/// Unit vectors on a great circle at uniform angular steps.
/// XOY starts at +X toward +Y, YOZ at +Y toward +Z, ZOX at +Z toward +X.
pub fn plane_circle(plane: Plane, step_deg: f64) -> Result<Vec<Vector3>> {
    if !(step_deg > 0.0 && step_deg.is_finite()) {
        return Err(invalid("angular step must be positive"));
    }
    let count = (360.0 / step_deg - 1e-9).ceil() as usize;
    let (u, v) = match plane {
        Plane::Xoy => (Vector3::x(), Vector3::y()),
        Plane::Yoz => (Vector3::y(), Vector3::z()),
        Plane::Zox => (Vector3::z(), Vector3::x()),
    };
    Ok((0..count)
        .map(|k| {
            let t = (k as f64 * step_deg).to_radians();
            // exact zeros at quarter turns
            let (s, c) = match (k as f64 * step_deg) % 360.0 {
                90.0 => (1.0, 0.0),
                180.0 => (0.0, -1.0),
                270.0 => (-1.0, 0.0),
                _ => t.sin_cos(),
            };
            (u * c + v * s).normalize()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transitions::{synthesize_spectrum, DeltaMI, Group, TransitionPeak};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn line(frequency: f64, intensity: f64) -> TransitionPeak {
        TransitionPeak {
            frequency,
            intensity,
            ground_index: 0,
            excited_index: 0,
            group: Group::A,
            delta_mi: DeltaMI::Zero,
        }
    }

    #[test]
    fn single_lorentzian_center() {
        let trace = synthesize_spectrum(&[line(10.0131, 1.0)], 9.0, 11.0, 0.020, 0.032).unwrap();
        let peaks = extract_peaks(&trace, 0.1, 30).unwrap();
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0].frequency - 10.0131).abs() < 1e-3);
        assert!(peaks[0].frequency_sigma >= 0.006);
        assert!(peaks[0].fwhm > 0.0);
    }

    #[test]
    fn flat_trace_gives_nothing() {
        let trace = SpectrumTrace::new((0..50).map(|k| k as f64 * 0.1).collect(), vec![0.0; 50]).unwrap();
        assert!(extract_peaks(&trace, 0.1, 30).unwrap().is_empty());
    }

    #[test]
    fn partially_resolved_pair() {
        let fwhm = 0.032;
        let trace = synthesize_spectrum(&[line(5.0, 1.0), line(5.0 + fwhm, 0.8)], 4.5, 5.5, 0.004, fwhm).unwrap();
        let peaks = extract_peaks(&trace, 0.1, 30).unwrap();
        assert_eq!(peaks.len(), 2, "{peaks:?}");
        assert!((peaks[0].frequency - 5.0).abs() < 0.2 * fwhm);
        assert!((peaks[1].frequency - (5.0 + fwhm)).abs() < 0.2 * fwhm);
    }

    #[test]
    fn well_separated_lines_recovered() {
        let fwhm = 0.032;
        let lines: Vec<_> = (0..6).map(|k| line(1.0 + 0.15 * k as f64 + 0.003 * k as f64, 0.3 + 0.12 * k as f64)).collect();
        let trace = synthesize_spectrum(&lines, 0.8, 2.2, 0.005, fwhm).unwrap();
        let peaks = extract_peaks(&trace, 0.1, 30).unwrap();
        assert_eq!(peaks.len(), lines.len());
        for (p, l) in peaks.iter().zip(&lines) {
            assert!((p.frequency - l.frequency).abs() < 2e-3);
            assert!((p.height - l.intensity).abs() < 0.02 * l.intensity);
            assert!(p.converged);
        }
    }

    #[test]
    fn noisy_center_rms() {
        let fwhm = 0.032;
        let clean = synthesize_spectrum(&[line(3.0, 1.0)], 2.8, 3.2, 0.01, fwhm).unwrap();
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sq = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let signal: Vec<f64> = clean.signal.iter().map(|s| s + noise.sample(&mut rng)).collect();
            let trace = SpectrumTrace::new(clean.frequencies.clone(), signal).unwrap();
            let best = extract_peaks(&trace, 0.1, 30)
                .unwrap()
                .into_iter()
                .max_by(|a, b| a.height.total_cmp(&b.height))
                .unwrap();
            sq += (best.frequency - 3.0).powi(2);
        }
        let rms = (sq / trials as f64).sqrt();
        assert!(rms < 0.005, "rms = {rms}");
    }

    #[test]
    fn prominence_threshold_bounds() {
        let trace = synthesize_spectrum(&[line(1.0, 1.0)], 0.0, 2.0, 0.01, 0.05).unwrap();
        assert!(extract_peaks(&trace, 0.0, 30).is_err());
        assert!(extract_peaks(&trace, 1.0, 30).is_err());
    }

    #[test]
    fn max_peaks_keeps_most_prominent() {
        let lines = [line(1.0, 0.2), line(1.5, 1.0), line(2.0, 0.5)];
        let trace = synthesize_spectrum(&lines, 0.5, 2.5, 0.005, 0.03).unwrap();
        let peaks = extract_peaks_with(
            &trace,
            &ExtractOptions {
                max_peaks: 2,
                residual_rounds: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0].frequency - 1.5).abs() < 1e-3);
        assert!((peaks[1].frequency - 2.0).abs() < 1e-3);
    }

    #[test]
    fn plane_quarter_steps() {
        let d = plane_circle(Plane::Xoy, 90.0).unwrap();
        let want = [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        ];
        assert_eq!(d.len(), 4);
        for (a, b) in d.iter().zip(&want) {
            assert!((a - b).norm() < 1e-15);
        }
        assert_eq!(plane_circle(Plane::Zox, 10.0).unwrap().len(), 36);
    }

    #[test]
    fn plane_names() {
        assert_eq!("yoz".parse::<Plane>().unwrap(), Plane::Yoz);
        assert!("XYZ".parse::<Plane>().is_err());
        assert!(plane_circle(Plane::Xoy, 0.0).is_err());
    }

    #[test]
    fn spiral_separation() {
        let n = 181;
        let d = fibonacci_sphere(n).unwrap();
        assert_eq!(d.len(), n);
        let mut min_sep = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                min_sep = min_sep.min(d[i].dot(&d[j]).clamp(-1.0, 1.0).acos());
            }
        }
        assert!(min_sep > 0.6 * (4.0 * PI / n as f64).sqrt(), "{min_sep}");
    }

    #[test]
    fn spiral_pair_is_antipodal() {
        let d = fibonacci_sphere(2).unwrap();
        assert!((d[0] + d[1]).norm() < 1e-15);
        assert!(fibonacci_sphere(1).is_err());
    }

    #[test]
    fn directions_unit_norm() {
        for n in [2, 3, 17, 181, 1000] {
            for v in fibonacci_sphere(n).unwrap() {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
        for plane in [Plane::Xoy, Plane::Yoz, Plane::Zox] {
            for v in plane_circle(plane, 7.3).unwrap() {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scan_requires_field() {
        let trace = SpectrumTrace::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert!(ScanRecord::new("s", FieldVector::zero(), trace.clone()).is_err());
        assert!(ScanRecord::new("s", FieldVector::new(0.0, 0.0, 0.4).unwrap(), trace).is_ok());
    }
}
