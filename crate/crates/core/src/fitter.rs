//! Peak assignment and two-phase basin-hopping fit of the 25 spin-Hamiltonian
//! parameters (12 per level plus f0).
//!
//! Phase 1 fits the g-tensors and f0 against per-field group centroids with a
//! Zeeman-only model. Phase 2 frees everything and fits individual peaks with
//! assignments held fixed during each local descent.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hamiltonian::{diagonalize_unchecked, eigenvalues, LabLevel, LevelParams, SpinOperators, CONSTANTS, DIM};
use crate::optim::{
    basin_hopping, levenberg_marquardt, nelder_mead, BasinHoppingOptions, Bounds, LeastSquares, LmOptions,
    LocalResult, NelderMeadOptions,
};
use crate::peaks::MeasuredPeak;
use crate::tensor::{EulerAngles, FieldVector, Matrix3, PrincipalTensor, Vector3};
use crate::transitions::{compute_transitions, SystemParams, TransitionPeak};

pub const N_PARAMS: usize = 25;
pub const PER_LEVEL: usize = 12;
pub const F0_INDEX: usize = 24;

/// Names of the packed parameter vector entries.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "Z1.g_z", "Z1.g_y", "Z1.g_x", "Z1.g.alpha", "Z1.g.beta", "Z1.g.gamma",
    "Z1.A_z", "Z1.A_y", "Z1.A_x", "Z1.A.alpha", "Z1.A.beta", "Z1.A.gamma",
    "Yi.g_z", "Yi.g_y", "Yi.g_x", "Yi.g.alpha", "Yi.g.beta", "Yi.g.gamma",
    "Yi.A_z", "Yi.A_y", "Yi.A_x", "Yi.A.alpha", "Yi.A.beta", "Yi.A.gamma",
    "f0",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Value,
    Angle,
    F0,
}

pub fn param_kind(index: usize) -> ParamKind {
    if index == F0_INDEX {
        ParamKind::F0
    } else if index % 6 < 3 {
        ParamKind::Value
    } else {
        ParamKind::Angle
    }
}

fn pack_tensor(t: &PrincipalTensor, out: &mut [f64]) {
    out[..3].copy_from_slice(&t.values);
    out[3] = t.angles.alpha;
    out[4] = t.angles.beta;
    out[5] = t.angles.gamma;
}

fn unpack_tensor(x: &[f64]) -> PrincipalTensor {
    PrincipalTensor::new([x[0], x[1], x[2]], EulerAngles::new(x[3], x[4], x[5]))
}

pub fn pack(sys: &SystemParams) -> Vec<f64> {
    let mut x = vec![0.0; N_PARAMS];
    for (l, level) in [&sys.z1, &sys.yi].into_iter().enumerate() {
        pack_tensor(&level.g, &mut x[PER_LEVEL * l..]);
        pack_tensor(&level.a, &mut x[PER_LEVEL * l + 6..]);
    }
    x[F0_INDEX] = sys.f0;
    x
}

/// Inverse of [`pack`]; quadrupole tensors are taken from `template`.
pub fn unpack(x: &[f64], template: &SystemParams) -> SystemParams {
    let level = |l: usize, q| LevelParams {
        g: unpack_tensor(&x[PER_LEVEL * l..]),
        a: unpack_tensor(&x[PER_LEVEL * l + 6..]),
        q,
    };
    SystemParams {
        z1: level(0, template.z1.q),
        yi: level(1, template.yi.q),
        f0: x[F0_INDEX],
    }
}

/// Per-parameter box, in packed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds(pub Vec<(f64, f64)>);

impl ParamBounds {
    /// g values in [0, 20], A values in [0, 5] GHz, angles in ±360°,
    /// f0 within ±100 GHz of the given centre.
    pub fn default_around(f0: f64) -> Self {
        let b = (0..N_PARAMS)
            .map(|k| match param_kind(k) {
                ParamKind::F0 => (f0 - 100.0, f0 + 100.0),
                ParamKind::Angle => (-360.0, 360.0),
                ParamKind::Value if k % PER_LEVEL < 6 => (0.0, 20.0),
                ParamKind::Value => (0.0, 5.0),
            })
            .collect();
        Self(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() != N_PARAMS {
            return Err(invalid(format!("expected {N_PARAMS} bounds, got {}", self.0.len())));
        }
        for (k, (lo, hi)) in self.0.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid(format!("bad bounds for {}: [{lo}, {hi}]", PARAM_NAMES[k])));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.0).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// One measured peak, the field it was recorded at, and optionally the
/// `(ground, excited)` level pair it is known to belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPeak {
    pub peak: MeasuredPeak,
    #[serde(rename = "B_T")]
    pub field: FieldVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct FitProblem {
    pub peaks: Vec<FitPeak>,
    pub bounds: ParamBounds,
    fields: Vec<Vector3>,
    field_of: Vec<usize>,
}

/// Minimum number of peaks before a fit is attempted.
pub const MIN_PEAKS: usize = N_PARAMS;

impl FitProblem {
    pub fn new(peaks: Vec<FitPeak>, bounds: ParamBounds) -> Result<Self> {
        bounds.validate()?;
        if peaks.len() < MIN_PEAKS {
            return Err(invalid(format!(
                "{} peaks supplied, at least {MIN_PEAKS} required",
                peaks.len()
            )));
        }
        let mut fields: Vec<Vector3> = Vec::new();
        let mut field_of = Vec::with_capacity(peaks.len());
        for p in &peaks {
            let b = p.field.vector();
            let idx = match fields.iter().position(|f| *f == b) {
                Some(i) => i,
                None => {
                    fields.push(b);
                    fields.len() - 1
                }
            };
            field_of.push(idx);
            if let Some((g, e)) = p.hint {
                if g >= DIM || e >= DIM {
                    return Err(invalid(format!("assignment hint ({g}, {e}) out of range")));
                }
            }
        }
        Ok(Self {
            peaks,
            bounds,
            fields,
            field_of,
        })
    }

    pub fn fields(&self) -> &[Vector3] {
        &self.fields
    }

    pub fn field_index(&self, peak: usize) -> usize {
        self.field_of[peak]
    }

    /// Hints where present, `None` elsewhere.
    pub fn hinted_assignments(&self) -> AssignmentMap {
        self.peaks.iter().map(|p| p.hint).collect()
    }

    pub fn fully_hinted(&self) -> bool {
        self.peaks.iter().all(|p| p.hint.is_some())
    }
}

/// Peak index → `(ground, excited)` level pair.
pub type AssignmentMap = Vec<Option<(usize, usize)>>;

/// One-to-one greedy matching by ascending `|Δf|`. Returns, for each measured
/// frequency, the index into `predicted` it was matched to. Equal distances
/// go to the more intense prediction.
pub fn assign_peaks(measured: &[f64], predicted: &[TransitionPeak], window: f64) -> Result<Vec<Option<usize>>> {
    if !(window > 0.0) {
        return Err(invalid("assignment window must be positive"));
    }
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| predicted[a].frequency.total_cmp(&predicted[b].frequency));
    let freqs: Vec<f64> = order.iter().map(|&i| predicted[i].frequency).collect();

    let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
    for (m, &f) in measured.iter().enumerate() {
        let start = freqs.partition_point(|&p| p < f - window);
        for (k, &p) in freqs.iter().enumerate().skip(start) {
            if p > f + window {
                break;
            }
            let idx = order[k];
            candidates.push(((p - f).abs(), predicted[idx].intensity, m, idx));
        }
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut out = vec![None; measured.len()];
    let mut taken = vec![false; predicted.len()];
    for (_, _, m, p) in candidates {
        if out[m].is_none() && !taken[p] {
            out[m] = Some(p);
            taken[p] = true;
        }
    }
    Ok(out)
}

/// Re-derives assignments for every unhinted peak from `sys`.
pub fn assign_problem(
    sys: &SystemParams,
    problem: &FitProblem,
    window: f64,
    min_intensity: f64,
) -> Result<AssignmentMap> {
    let mut out = problem.hinted_assignments();
    let per_field: Vec<Result<Vec<TransitionPeak>>> = problem
        .fields
        .par_iter()
        .map(|b| {
            let field = FieldVector::from_vector(*b)?;
            Ok(compute_transitions(sys, &field)?
                .into_iter()
                .filter(|t| t.intensity >= min_intensity)
                .collect())
        })
        .collect();
    let mut by_field: Vec<Vec<usize>> = vec![Vec::new(); problem.fields.len()];
    for (k, p) in problem.peaks.iter().enumerate() {
        if p.hint.is_none() {
            by_field[problem.field_of[k]].push(k);
        }
    }
    for (fi, predicted) in per_field.into_iter().enumerate() {
        let predicted = predicted?;
        let members = &by_field[fi];
        if members.is_empty() {
            continue;
        }
        // predictions already claimed by hinted peaks at this field are unavailable
        let claimed: Vec<(usize, usize)> = (0..problem.peaks.len())
            .filter(|&k| problem.field_of[k] == fi)
            .filter_map(|k| problem.peaks[k].hint)
            .collect();
        let available: Vec<TransitionPeak> = predicted
            .into_iter()
            .filter(|t| !claimed.contains(&(t.ground_index, t.excited_index)))
            .collect();
        let freqs: Vec<f64> = members.iter().map(|&k| problem.peaks[k].peak.frequency).collect();
        let matched = assign_peaks(&freqs, &available, window)?;
        for (&k, m) in members.iter().zip(matched) {
            out[k] = m.map(|i| (available[i].ground_index, available[i].excited_index));
        }
    }
    Ok(out)
}

fn level_energies(sys: &SystemParams, fields: &[Vector3]) -> Result<Vec<([f64; DIM], [f64; DIM])>> {
    let z1 = sys.z1.lab()?;
    let yi = sys.yi.lab()?;
    Ok(fields
        .par_iter()
        .map(|b| (eigenvalues(&z1.hamiltonian(b)), eigenvalues(&yi.hamiltonian(b))))
        .collect())
}

/// `f_sim − f_exp` for every assigned peak, in peak order.
pub fn residuals(sys: &SystemParams, problem: &FitProblem, assignments: &AssignmentMap) -> Result<Vec<f64>> {
    let energies = level_energies(sys, &problem.fields)?;
    Ok(residuals_from(sys.f0, &energies, problem, assignments))
}

fn residuals_from(
    f0: f64,
    energies: &[([f64; DIM], [f64; DIM])],
    problem: &FitProblem,
    assignments: &AssignmentMap,
) -> Vec<f64> {
    problem
        .peaks
        .iter()
        .zip(assignments)
        .enumerate()
        .filter_map(|(k, (p, a))| {
            let (g, e) = (*a)?;
            let (eg, ee) = &energies[problem.field_of[k]];
            Some(f0 + ee[e] - eg[g] - p.peak.frequency)
        })
        .collect()
}

pub fn rms(r: &[f64]) -> f64 {
    (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()
}

/// Root-mean-square deviation over the assigned peaks.
pub fn rmsd_objective(sys: &SystemParams, problem: &FitProblem, assignments: &AssignmentMap) -> Result<f64> {
    let r = residuals(sys, problem, assignments)?;
    if r.is_empty() {
        return Err(Error::UndefinedObjective("no assigned peaks".into()));
    }
    Ok(rms(&r))
}

/// Sorted energies and `∂E_n/∂p` for the 12 parameters of one level.
fn level_derivatives(level: &LabLevel, jg: &[Matrix3; 6], ja: &[Matrix3; 6], b: &Vector3) -> ([f64; DIM], [[f64; PER_LEVEL]; DIM]) {
    let ops = SpinOperators::get();
    let spectrum = diagonalize_unchecked(&level.hamiltonian(b));
    let mu_e = CONSTANTS.mu_e_over_h;
    let mut d = [[0.0; PER_LEVEL]; DIM];
    for (n, row) in d.iter_mut().enumerate() {
        let s = spectrum.electron_spin(n);
        let t = Matrix3::from_fn(|j, k| spectrum.expectation(&ops.is[j][k], n));
        for m in 0..6 {
            // ∂E/∂g_jk = μe B_j ⟨S_k⟩,  ∂E/∂A_jk = ⟨I_j S_k⟩
            row[m] = mu_e * (b.transpose() * jg[m] * s)[(0, 0)];
            row[6 + m] = t.component_mul(&ja[m]).sum();
        }
    }
    let e = std::array::from_fn(|n| spectrum.eigenvalues[n]);
    (e, d)
}

/// Residuals and their Jacobian with respect to the packed parameters.
pub fn residual_jacobian(
    sys: &SystemParams,
    problem: &FitProblem,
    assignments: &AssignmentMap,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let z1 = sys.z1.lab()?;
    let yi = sys.yi.lab()?;
    let jac = |t: &PrincipalTensor| t.lab_matrix_jacobian();
    let (jg1, ja1, jg2, ja2) = (jac(&sys.z1.g), jac(&sys.z1.a), jac(&sys.yi.g), jac(&sys.yi.a));
    let per_field: Vec<_> = problem
        .fields
        .par_iter()
        .map(|b| (level_derivatives(&z1, &jg1, &ja1, b), level_derivatives(&yi, &jg2, &ja2, b)))
        .collect();

    let rows: Vec<usize> = (0..problem.peaks.len()).filter(|&k| assignments[k].is_some()).collect();
    let mut r = Vec::with_capacity(rows.len());
    let mut j = DMatrix::zeros(rows.len(), N_PARAMS);
    for (row, &k) in rows.iter().enumerate() {
        let (g, e) = assignments[k].unwrap();
        let ((eg, dg), (ee, de)) = &per_field[problem.field_of[k]];
        r.push(sys.f0 + ee[e] - eg[g] - problem.peaks[k].peak.frequency);
        for m in 0..PER_LEVEL {
            j[(row, m)] = -dg[g][m];
            j[(row, PER_LEVEL + m)] = de[e][m];
        }
        j[(row, F0_INDEX)] = 1.0;
    }
    Ok((r, j))
}

/// Full model with fixed assignments, as a least-squares problem in the
/// packed parameter vector.
pub struct PeakModel<'a> {
    pub problem: &'a FitProblem,
    pub assignments: &'a AssignmentMap,
    pub template: SystemParams,
}

impl LeastSquares for PeakModel<'_> {
    fn residuals(&mut self, x: &[f64]) -> Option<Vec<f64>> {
        residuals(&unpack(x, &self.template), self.problem, self.assignments).ok()
    }

    fn jacobian(&mut self, x: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
        residual_jacobian(&unpack(x, &self.template), self.problem, self.assignments).ok()
    }
}

/// Measured group centroids for the Zeeman-only phase, one per
/// (field, ground branch, excited branch) combination present.
#[derive(Clone, Debug)]
struct Centroid {
    field: usize,
    ground_upper: bool,
    excited_upper: bool,
    frequency: f64,
}

fn centroids(problem: &FitProblem, assignments: &AssignmentMap) -> Vec<Centroid> {
    let half = DIM / 2;
    let mut acc: Vec<[(f64, usize); 4]> = vec![[(0.0, 0); 4]; problem.fields.len()];
    for (k, a) in assignments.iter().enumerate() {
        if let Some((g, e)) = a {
            let slot = 2 * usize::from(*g >= half) + usize::from(*e >= half);
            let c = &mut acc[problem.field_of[k]][slot];
            c.0 += problem.peaks[k].peak.frequency;
            c.1 += 1;
        }
    }
    let mut out = Vec::new();
    for (field, slots) in acc.iter().enumerate() {
        for (slot, &(sum, n)) in slots.iter().enumerate() {
            if n > 0 {
                out.push(Centroid {
                    field,
                    ground_upper: slot >= 2,
                    excited_upper: slot % 2 == 1,
                    frequency: sum / n as f64,
                });
            }
        }
    }
    out
}

fn zeeman_rmsd(x: &[f64], fields: &[Vector3], cents: &[Centroid]) -> f64 {
    let gz = unpack_tensor(&x[0..6]).lab_matrix().transpose();
    let ge = unpack_tensor(&x[PER_LEVEL..PER_LEVEL + 6]).lab_matrix().transpose();
    let mu = CONSTANTS.mu_e_over_h;
    let split: Vec<(f64, f64)> = fields
        .iter()
        .map(|b| (mu * (gz * b).norm(), mu * (ge * b).norm()))
        .collect();
    let sign = |up: bool| if up { 0.5 } else { -0.5 };
    let ss: f64 = cents
        .iter()
        .map(|c| {
            let (zg, ze) = split[c.field];
            let f = x[F0_INDEX] + sign(c.excited_upper) * ze - sign(c.ground_upper) * zg;
            (f - c.frequency).powi(2)
        })
        .sum();
    (ss / cents.len() as f64).sqrt()
}

/// Assignment-free Zeeman objective: rms distance of every measured peak to
/// the nearest of the four predicted group centres at its field.
fn zeeman_rmsd_nearest(x: &[f64], fields: &[Vector3], peaks: &[(usize, f64)]) -> f64 {
    let gz = unpack_tensor(&x[0..6]).lab_matrix().transpose();
    let ge = unpack_tensor(&x[PER_LEVEL..PER_LEVEL + 6]).lab_matrix().transpose();
    let mu = CONSTANTS.mu_e_over_h;
    let centres: Vec<[f64; 4]> = fields
        .iter()
        .map(|b| {
            let (zg, ze) = (mu * (gz * b).norm(), mu * (ge * b).norm());
            let f0 = x[F0_INDEX];
            [
                f0 + 0.5 * (zg - ze),
                f0 + 0.5 * (zg + ze),
                f0 - 0.5 * (zg + ze),
                f0 - 0.5 * (zg - ze),
            ]
        })
        .collect();
    let ss: f64 = peaks
        .iter()
        .map(|&(field, f)| centres[field].iter().map(|c| (f - c).powi(2)).fold(f64::INFINITY, f64::min))
        .sum();
    (ss / peaks.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMinimizer {
    Simplex,
    LevenbergMarquardt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScales {
    /// Fraction of each principal-value bound width.
    pub value_fraction: f64,
    pub angle_deg: f64,
    #[serde(rename = "f0_GHz")]
    pub f0: f64,
}

impl Default for StepScales {
    fn default() -> Self {
        Self {
            value_fraction: 0.05,
            angle_deg: 10.0,
            f0: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub seed: u64,
    pub phase1_hops: usize,
    pub phase2_hops: usize,
    /// Independent seeded replicas of phase 2; the best is kept.
    pub replicas: usize,
    pub skip_phase1: bool,
    pub steps: StepScales,
    pub phase2_minimizer: LocalMinimizer,
    /// Local stopping tolerance on rmsd change (GHz).
    pub tolerance: f64,
    pub max_local_iterations: usize,
    #[serde(rename = "window_GHz")]
    pub window: f64,
    /// Predicted lines weaker than this are not offered to the assigner.
    pub min_intensity: f64,
    /// Stop a phase after this many hops without improvement.
    pub stall_hops: Option<usize>,
    /// Hops compare `√((Σr² + n_unassigned·window²)/N)` instead of the bare
    /// rmsd, so dropping peaks out of the window is not rewarded. Only
    /// affects problems without a full set of hints.
    #[serde(default = "yes")]
    pub penalize_unassigned: bool,
    /// Unhinted descents start assigning with this multiple of the window
    /// and halve it each round.
    #[serde(default = "sixteen")]
    pub initial_window_factor: f64,
}

fn sixteen() -> f64 {
    16.0
}

fn yes() -> bool {
    true
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            phase1_hops: 50,
            phase2_hops: 200,
            replicas: 1,
            skip_phase1: false,
            steps: StepScales::default(),
            phase2_minimizer: LocalMinimizer::LevenbergMarquardt,
            tolerance: 1e-6,
            max_local_iterations: 100,
            window: 0.06,
            min_intensity: 0.05,
            stall_hops: None,
            penalize_unassigned: true,
            initial_window_factor: 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignedPeak {
    pub peak: usize,
    pub gi: usize,
    pub ei: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: SystemParams,
    #[serde(rename = "rmsd_GHz")]
    pub rmsd: f64,
    pub n_assigned: usize,
    pub assignments: Vec<AssignedPeak>,
    pub unassigned: Vec<usize>,
    #[serde(rename = "phase1_rmsd_GHz")]
    pub phase1_rmsd: Option<f64>,
    /// Best hop objective after the initial descent and after every phase-2 hop.
    #[serde(rename = "best_history_GHz")]
    pub best_history: Vec<f64>,
    pub iterations: usize,
    pub hops: usize,
    pub local_failures: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn assignment_map(&self, n_peaks: usize) -> AssignmentMap {
        let mut m = vec![None; n_peaks];
        for a in &self.assignments {
            if a.peak < n_peaks {
                m[a.peak] = Some((a.gi, a.ei));
            }
        }
        m
    }
}

fn hop_steps(bounds: &ParamBounds, steps: &StepScales) -> Vec<f64> {
    bounds
        .0
        .iter()
        .enumerate()
        .map(|(k, (lo, hi))| match param_kind(k) {
            ParamKind::Value => steps.value_fraction * (hi - lo),
            ParamKind::Angle => steps.angle_deg,
            ParamKind::F0 => steps.f0,
        })
        .collect()
}

/// Freezes γ of any tensor whose two minor principal values have collapsed.
fn degeneracy_mask(x: &[f64], free: &mut [bool]) {
    for base in [0, 6, 12, 18] {
        if x[base + 1].abs() < 1e-3 && x[base + 2].abs() < 1e-3 {
            free[base + 5] = false;
        }
    }
}

fn replica_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Zeeman-only phase. Hinted problems fit group centroids; otherwise every
/// peak is attributed to its nearest predicted group centre.
fn phase1(x0: &[f64], problem: &FitProblem, config: &FitConfig, bounds: &Bounds) -> Option<(Vec<f64>, f64)> {
    let fields = &problem.fields;
    let cents = centroids(problem, &problem.hinted_assignments());
    let free_peaks: Vec<(usize, f64)> = (0..problem.peaks.len())
        .map(|k| (problem.field_of[k], problem.peaks[k].peak.frequency))
        .collect();
    let hinted = problem.fully_hinted();
    if hinted && cents.is_empty() {
        return None;
    }
    let objective = |y: &[f64]| {
        if hinted {
            zeeman_rmsd(y, fields, &cents)
        } else {
            zeeman_rmsd_nearest(y, fields, &free_peaks)
        }
    };
    let mut steps = hop_steps(&problem.bounds, &config.steps);
    let mut simplex_steps = vec![0.0; N_PARAMS];
    for k in 0..N_PARAMS {
        let in_g = k == F0_INDEX || k % PER_LEVEL < 6;
        if !in_g {
            steps[k] = 0.0;
        } else {
            simplex_steps[k] = match param_kind(k) {
                ParamKind::Value => 0.1 * x0[k].abs().max(0.1),
                ParamKind::Angle => 5.0,
                ParamKind::F0 => 0.5,
            };
        }
    }
    let nm = NelderMeadOptions {
        max_evals: 20_000,
        f_tol: config.tolerance,
        x_tol: 1e-10,
    };
    let local = |x: &[f64]| {
        let mut s = simplex_steps.clone();
        let mut free: Vec<bool> = s.iter().map(|v| *v != 0.0).collect();
        degeneracy_mask(x, &mut free);
        for (v, f) in s.iter_mut().zip(&free) {
            if !f {
                *v = 0.0;
            }
        }
        let mut r = nelder_mead(objective, x, &s, Some(bounds), &nm);
        // one restart from the reported optimum guards against simplex collapse
        let again = nelder_mead(objective, &r.x, &s, Some(bounds), &nm);
        if again.f <= r.f {
            r.evals += again.evals;
            r.x = again.x;
            r.f = again.f;
        }
        Some(r)
    };
    let opts = BasinHoppingOptions {
        hops: config.phase1_hops,
        step_scales: steps,
        stall_hops: config.stall_hops,
    };
    let mut rng = replica_rng(config.seed, 0);
    let r = basin_hopping(x0, local, Some(bounds), &opts, &mut rng)?;
    Some((r.x, r.f))
}

/// Local descent with fixed assignments, re-deriving unhinted assignments
/// from the start point and again after each descent until they settle.
fn phase2_local(
    x: &[f64],
    problem: &FitProblem,
    template: &SystemParams,
    config: &FitConfig,
    bounds: &Bounds,
) -> Option<(LocalResult, AssignmentMap)> {
    let refresh = |x: &[f64], scale: f64| -> Option<AssignmentMap> {
        if problem.fully_hinted() {
            Some(problem.hinted_assignments())
        } else {
            assign_problem(&unpack(x, template), problem, scale * config.window, config.min_intensity).ok()
        }
    };
    let mut free = vec![true; N_PARAMS];
    degeneracy_mask(x, &mut free);
    let mut scale = if problem.fully_hinted() {
        1.0
    } else {
        config.initial_window_factor.max(1.0)
    };
    let mut assignments = refresh(x, scale)?;
    let mut total = LocalResult {
        x: x.to_vec(),
        f: f64::INFINITY,
        evals: 0,
        iterations: 0,
        converged: false,
    };
    let rounds = 3 + scale.log2().ceil() as usize;
    for _ in 0..rounds {
        if assignments.iter().all(Option::is_none) {
            return None;
        }
        let r = match config.phase2_minimizer {
            LocalMinimizer::LevenbergMarquardt => {
                let mut model = PeakModel {
                    problem,
                    assignments: &assignments,
                    template: *template,
                };
                let lm = LmOptions {
                    max_iterations: config.max_local_iterations,
                    f_tol: config.tolerance,
                    ..Default::default()
                };
                levenberg_marquardt(&mut model, &total.x, &free, Some(bounds), &lm)?
            }
            LocalMinimizer::Simplex => {
                let steps: Vec<f64> = (0..N_PARAMS)
                    .map(|k| {
                        if !free[k] {
                            0.0
                        } else {
                            match param_kind(k) {
                                ParamKind::Value => 0.05 * total.x[k].abs().max(0.05),
                                ParamKind::Angle => 2.0,
                                ParamKind::F0 => 0.1,
                            }
                        }
                    })
                    .collect();
                let nm = NelderMeadOptions {
                    max_evals: config.max_local_iterations * 50,
                    f_tol: config.tolerance,
                    x_tol: 1e-10,
                };
                let obj = |y: &[f64]| {
                    residuals(&unpack(y, template), problem, &assignments)
                        .map(|r| rms(&r))
                        .unwrap_or(f64::INFINITY)
                };
                nelder_mead(obj, &total.x, &steps, Some(bounds), &nm)
            }
        };
        total.evals += r.evals;
        total.iterations += r.iterations;
        total.x = r.x;
        total.f = r.f;
        total.converged = r.converged;
        let narrowing = scale > 1.0;
        scale = (0.5 * scale).max(1.0);
        let next = refresh(&total.x, scale)?;
        if next == assignments && !narrowing {
            break;
        }
        assignments = next;
        // the reported value must belong to the returned assignments
        let res = residuals(&unpack(&total.x, template), problem, &assignments).ok()?;
        if res.is_empty() {
            return None;
        }
        total.f = rms(&res);
    }
    if config.penalize_unassigned && !problem.fully_hinted() {
        let n = assignments.len() as f64;
        let n_a = assignments.iter().filter(|a| a.is_some()).count() as f64;
        total.f = ((n_a * total.f * total.f + (n - n_a) * config.window * config.window) / n).sqrt();
    }
    Some((total, assignments))
}

/// Both levels with every tensor in the canonical Euler gauge.
pub fn canonical_params(sys: &SystemParams) -> SystemParams {
    let c = |t: &PrincipalTensor| t.canonical().unwrap_or(*t);
    let level = |l: &LevelParams| LevelParams {
        g: c(&l.g),
        a: c(&l.a),
        q: l.q,
    };
    SystemParams {
        z1: level(&sys.z1),
        yi: level(&sys.yi),
        f0: sys.f0,
    }
}

/// Two-phase basin-hopping fit from `init`.
pub fn fit_basin_hopping(problem: &FitProblem, init: &SystemParams, config: &FitConfig) -> Result<FitResult> {
    init.validate()?;
    let x0 = pack(init);
    if !problem.bounds.contains(&x0) {
        return Err(invalid("initial guess lies outside the bounds"));
    }
    if !(config.window > 0.0) {
        return Err(invalid("assignment window must be positive"));
    }
    let bounds: Bounds = problem.bounds.0.clone();

    let (x1, phase1_rmsd) = if config.skip_phase1 {
        (x0.clone(), None)
    } else {
        match phase1(&x0, problem, config, &bounds) {
            Some((x, f)) => (x, Some(f)),
            None => (x0.clone(), None),
        }
    };

    let steps = hop_steps(&problem.bounds, &config.steps);
    let replicas: Vec<Option<(crate::optim::BasinHoppingResult, AssignmentMap)>> = (0..config.replicas.max(1))
        .into_par_iter()
        .map(|rep| {
            let mut rng = replica_rng(config.seed, 1 + rep as u64);
            let mut last: Vec<(Vec<f64>, AssignmentMap)> = Vec::new();
            let local = |x: &[f64]| {
                let (r, a) = phase2_local(x, problem, init, config, &bounds)?;
                last.push((r.x.clone(), a));
                Some(r)
            };
            let opts = BasinHoppingOptions {
                hops: config.phase2_hops,
                step_scales: steps.clone(),
                stall_hops: config.stall_hops,
            };
            let res = basin_hopping(&x1, local, Some(&bounds), &opts, &mut rng)?;
            let assignments = last.into_iter().find(|(x, _)| *x == res.x).map(|(_, a)| a)?;
            Some((res, assignments))
        })
        .collect();

    let mut best: Option<(crate::optim::BasinHoppingResult, AssignmentMap)> = None;
    let mut failures = 0;
    for r in replicas {
        match r {
            Some(r) => {
                failures += r.0.local_failures;
                if best.as_ref().is_none_or(|b| r.0.f < b.0.f) {
                    best = Some(r);
                }
            }
            None => failures += config.phase2_hops + 1,
        }
    }
    let Some((res, assignments)) = best else {
        return Err(Error::FitFailed(format!(
            "every local minimization failed (phase-1 rmsd {phase1_rmsd:?} GHz, {failures} failures)"
        )));
    };

    let params = canonical_params(&unpack(&res.x, init));
    let rmsd = rmsd_objective(&params, problem, &assignments)?;
    let (assigned, unassigned): (Vec<usize>, Vec<usize>) =
        (0..problem.peaks.len()).partition(|&k| assignments[k].is_some());
    Ok(FitResult {
        params,
        rmsd,
        n_assigned: assigned.len(),
        assignments: assigned
            .iter()
            .map(|&k| {
                let (gi, ei) = assignments[k].unwrap();
                AssignedPeak { peak: k, gi, ei }
            })
            .collect(),
        unassigned,
        phase1_rmsd,
        best_history: res.best_history,
        iterations: res.iterations,
        hops: res.hops,
        local_failures: failures,
        converged: res.converged,
    })
}

/// Synthetic measured peaks: every transition at least `min_intensity`
/// strong, at `|B| = magnitude` along each direction, with Gaussian
/// frequency noise. Each peak carries its generating level pair as a hint.
pub fn synthetic_peaks(
    sys: &SystemParams,
    directions: &[Vector3],
    magnitude: f64,
    noise_sigma: f64,
    min_intensity: f64,
    seed: u64,
) -> Result<Vec<FitPeak>> {
    let fields: Vec<FieldVector> = directions
        .iter()
        .map(|d| FieldVector::along(d, magnitude))
        .collect::<Result<_>>()?;
    let lines: Vec<Vec<TransitionPeak>> = fields
        .par_iter()
        .map(|b| compute_transitions(sys, b))
        .collect::<Result<_>>()?;
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, (b, lines)) in fields.iter().zip(lines).enumerate() {
        for t in lines.into_iter().filter(|t| t.intensity >= min_intensity) {
            let df = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            out.push(FitPeak {
                peak: MeasuredPeak {
                    frequency: t.frequency + df,
                    frequency_sigma: noise_sigma.max(0.006),
                    height: t.intensity,
                    fwhm: 0.032,
                    scan_id: format!("scan{i:03}"),
                    converged: true,
                },
                field: *b,
                hint: Some((t.ground_index, t.excited_index)),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peaks::fibonacci_sphere;
    use crate::presets;
    use crate::transitions::{DeltaMI, Group};

    fn line(f: f64, intensity: f64) -> TransitionPeak {
        TransitionPeak {
            frequency: f,
            intensity,
            ground_index: 0,
            excited_index: 0,
            group: Group::A,
            delta_mi: DeltaMI::Zero,
        }
    }

    fn small_problem(noise: f64, n_dirs: usize) -> (SystemParams, FitProblem) {
        let sys = presets::er_si_system();
        let dirs = fibonacci_sphere(n_dirs).unwrap();
        let peaks = synthetic_peaks(&sys, &dirs, 0.4, noise, 0.5, 7).unwrap();
        let problem = FitProblem::new(peaks, ParamBounds::default_around(sys.f0)).unwrap();
        (sys, problem)
    }

    #[test]
    fn pack_roundtrip() {
        let sys = presets::er_si_system();
        let x = pack(&sys);
        assert_eq!(x.len(), N_PARAMS);
        let back = unpack(&x, &sys);
        assert_eq!(pack(&back), x);
        assert_eq!(PARAM_NAMES[F0_INDEX], "f0");
        assert_eq!(param_kind(4), ParamKind::Angle);
        assert_eq!(param_kind(18), ParamKind::Value);
    }

    #[test]
    fn identity_assignment() {
        let predicted: Vec<_> = (0..5).map(|k| line(10.0 + k as f64 * 0.2, 1.0)).collect();
        let measured: Vec<f64> = predicted.iter().map(|p| p.frequency).collect();
        let a = assign_peaks(&measured, &predicted, 0.06).unwrap();
        assert_eq!(a, (0..5).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn tie_goes_to_intensity() {
        let predicted = vec![line(10.0, 0.3), line(10.125, 0.9)];
        let a = assign_peaks(&[10.0625], &predicted, 0.07).unwrap();
        assert_eq!(a, vec![Some(1)]);
        let predicted = vec![line(10.0, 0.9), line(10.125, 0.3)];
        assert_eq!(assign_peaks(&[10.0625], &predicted, 0.07).unwrap(), vec![Some(0)]);
    }

    #[test]
    fn out_of_window_unassigned() {
        let predicted = vec![line(10.0, 1.0)];
        let a = assign_peaks(&[10.0, 10.001, 11.0], &predicted, 0.06).unwrap();
        assert_eq!(a, vec![Some(0), None, None]);
        assert!(assign_peaks(&[1.0], &predicted, 0.0).is_err());
    }

    #[test]
    fn rmsd_identities() {
        let (sys, problem) = small_problem(0.0, 12);
        let a = problem.hinted_assignments();
        let r = rmsd_objective(&sys, &problem, &a).unwrap();
        assert!(r < 1e-10, "{r}");
        let none: AssignmentMap = vec![None; problem.peaks.len()];
        assert!(matches!(
            rmsd_objective(&sys, &problem, &none),
            Err(Error::UndefinedObjective(_))
        ));
    }

    #[test]
    fn single_residual_rmsd() {
        let (sys, mut problem) = small_problem(0.0, 12);
        problem.peaks[0].peak.frequency -= 0.083;
        let mut a: AssignmentMap = vec![None; problem.peaks.len()];
        a[0] = problem.peaks[0].hint;
        let r = rmsd_objective(&sys, &problem, &a).unwrap();
        assert!((r - 0.083).abs() < 1e-9);
    }

    #[test]
    fn too_few_peaks_rejected() {
        let (_, problem) = small_problem(0.0, 2);
        let few = problem.peaks[..10].to_vec();
        assert!(FitProblem::new(few, problem.bounds.clone()).is_err());
        let mut bad = problem.bounds.clone();
        bad.0[3] = (f64::NEG_INFINITY, 0.0);
        assert!(FitProblem::new(problem.peaks.clone(), bad).is_err());
    }

    #[test]
    fn gauge_invariance_of_objective() {
        let (sys, problem) = small_problem(0.01, 8);
        let a = problem.hinted_assignments();
        let mut g = sys;
        g.z1.g.angles = sys.z1.g.angles.gauge_partner();
        g.yi.a.angles = sys.yi.a.angles.gauge_partner();
        let r0 = rmsd_objective(&sys, &problem, &a).unwrap();
        let r1 = rmsd_objective(&g, &problem, &a).unwrap();
        assert!((r0 - r1).abs() < 1e-9, "{r0} vs {r1}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (sys, problem) = small_problem(0.02, 6);
        let a = problem.hinted_assignments();
        let (r, j) = residual_jacobian(&sys, &problem, &a).unwrap();
        let x = pack(&sys);
        for k in 0..N_PARAMS {
            let h = match param_kind(k) {
                ParamKind::Angle => 1e-4,
                _ => 1e-6,
            };
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let rp = residuals(&unpack(&xp, &sys), &problem, &a).unwrap();
            let rm = residuals(&unpack(&xm, &sys), &problem, &a).unwrap();
            for i in 0..r.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                let scale = fd.abs().max(j[(i, k)].abs()).max(1.0);
                assert!(
                    (fd - j[(i, k)]).abs() < 1e-4 * scale,
                    "param {} row {i}: fd {fd} analytic {}",
                    PARAM_NAMES[k],
                    j[(i, k)]
                );
            }
        }
    }

    #[test]
    fn assignment_with_noise_mostly_correct() {
        let sys = presets::er_si_system();
        let dirs = fibonacci_sphere(40).unwrap();
        let mut peaks = synthetic_peaks(&sys, &dirs, 0.4, 0.010, 0.5, 11).unwrap();
        let truth: Vec<_> = peaks.iter().map(|p| p.hint).collect();
        for p in &mut peaks {
            p.hint = None;
        }
        let problem = FitProblem::new(peaks, ParamBounds::default_around(sys.f0)).unwrap();
        let a = assign_problem(&sys, &problem, 0.06, 0.05).unwrap();
        let correct = a.iter().zip(&truth).filter(|(x, y)| x == y).count();
        assert!(correct as f64 >= 0.99 * truth.len() as f64, "{correct}/{}", truth.len());
    }

    #[test]
    fn fixed_point_at_truth() {
        let (sys, problem) = small_problem(0.0, 12);
        let config = FitConfig {
            phase1_hops: 0,
            phase2_hops: 0,
            skip_phase1: true,
            ..Default::default()
        };
        let r = fit_basin_hopping(&problem, &sys, &config).unwrap();
        assert!(r.rmsd < 1e-6);
        assert_eq!(r.hops, 0);
        let check = rmsd_objective(&r.params, &problem, &r.assignment_map(problem.peaks.len())).unwrap();
        assert!((check - r.rmsd).abs() < 1e-12);
    }

    #[test]
    fn misordered_start_matches_in_lab_frame() {
        let (sys, problem) = small_problem(0.0, 16);
        let mut start = sys;
        // swap the labels of the two minor axes: same lab matrix, different triple
        let g = sys.z1.g;
        let swapped = PrincipalTensor::new(
            [g.vz(), g.vx(), g.vy()],
            EulerAngles::new(g.angles.alpha, g.angles.beta, g.angles.gamma + 90.0),
        );
        assert!((swapped.lab_matrix() - g.lab_matrix()).amax() < 1e-9);
        start.z1.g = swapped;
        start.z1.g.values[0] *= 1.002;
        let config = FitConfig {
            phase2_hops: 2,
            skip_phase1: true,
            ..Default::default()
        };
        let r = fit_basin_hopping(&problem, &start, &config).unwrap();
        assert!(r.rmsd < 1e-5, "rmsd {}", r.rmsd);
        let diff = (r.params.z1.g.lab_matrix() - sys.z1.g.lab_matrix()).amax();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn deterministic_under_seed() {
        let (sys, problem) = small_problem(0.03, 10);
        let mut start = sys;
        start.f0 += 0.3;
        start.z1.g.values[0] *= 1.01;
        let config = FitConfig {
            phase1_hops: 3,
            phase2_hops: 2,
            ..Default::default()
        };
        let a = fit_basin_hopping(&problem, &start, &config).unwrap();
        let b = fit_basin_hopping(&problem, &start, &config).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.best_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn start_outside_bounds_rejected() {
        let (sys, problem) = small_problem(0.0, 10);
        let mut start = sys;
        start.z1.g.values[0] = 25.0;
        assert!(fit_basin_hopping(&problem, &start, &FitConfig::default()).is_err());
    }

    #[test]
    fn lm_descent_is_monotone() {
        let (sys, problem) = small_problem(0.03, 10);
        let a = problem.hinted_assignments();
        let mut x = pack(&sys);
        x[0] *= 1.02;
        x[F0_INDEX] += 0.5;
        let start = rmsd_objective(&unpack(&x, &sys), &problem, &a).unwrap();
        let mut model = PeakModel {
            problem: &problem,
            assignments: &a,
            template: sys,
        };
        let r = levenberg_marquardt(&mut model, &x, &[true; N_PARAMS], Some(&problem.bounds.0), &LmOptions::default())
            .unwrap();
        assert!(r.f <= start);
        assert!(r.f < 0.05, "rmsd {}", r.f);
    }
}
