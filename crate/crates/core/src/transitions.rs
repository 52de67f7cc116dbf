//! Optical transitions between the Z1 and Yi hyperfine manifolds.
//!
//! Frequencies are `f0 + E_excited − E_ground` over all 16 × 16 sorted level
//! pairs. Relative intensities use a nuclear-overlap model: the optical
//! dipole is taken to act trivially on the nuclear spin and identically on
//! every electron-spin combination, so
//! `I(g→e) = Σ_{s,s′} |Σ_m c_e*(s′, m) c_g(s, m)|²`.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hamiltonian::{
    angular_momentum, diagonalize_unchecked, quantization_axis_lab, LabLevel, LevelParams,
    LevelSpectrum, C64, CONSTANTS, DIM, NUCLEAR_DIM, NUCLEAR_SPIN,
};
use crate::tensor::{FieldVector, Vector3};

/// Both levels plus the zero-field optical frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub z1: LevelParams,
    pub yi: LevelParams,
    #[serde(rename = "f0_GHz")]
    pub f0: f64,
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        self.z1.validate()?;
        self.yi.validate()?;
        if !(self.f0.is_finite() && self.f0 > 0.0) {
            return Err(invalid(format!("f0 must be positive, got {}", self.f0)));
        }
        Ok(())
    }
}

/// Transition group, or `Mixed` when either state has no electron branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    A,
    B,
    C,
    D,
    Mixed,
}

impl Group {
    pub fn as_str(&self) -> &'static str {
        match self {
            Group::A => "a",
            Group::B => "b",
            Group::C => "c",
            Group::D => "d",
            Group::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeltaMI {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "+1")]
    Plus,
    #[serde(rename = "-1")]
    Minus,
    #[serde(rename = "other")]
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Lower,
    Upper,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionPeak {
    #[serde(rename = "f_GHz")]
    pub frequency: f64,
    #[serde(rename = "I_rel")]
    pub intensity: f64,
    #[serde(rename = "gi")]
    pub ground_index: usize,
    #[serde(rename = "ei")]
    pub excited_index: usize,
    pub group: Group,
    #[serde(rename = "dmI")]
    pub delta_mi: DeltaMI,
}

/// A state counts as belonging to an electron branch when `|2⟨S·n̂⟩|` is at
/// least this large.
pub const BRANCH_POLARIZATION_MIN: f64 = 0.5;
/// Minimum weight of the dominant nuclear projection for a definite `m_I`.
pub const DOMINANT_WEIGHT_MIN: f64 = 0.6;

/// Eigenstates of one level at one field, with branch and `m_I` labels.
#[derive(Clone, Debug)]
pub struct LevelAnalysis {
    pub spectrum: LevelSpectrum,
    pub branch: [Branch; DIM],
    /// Dominant `2·m_I` along the level's hyperfine axis, if definite.
    pub twice_m_i: [Option<i32>; DIM],
}

impl LevelAnalysis {
    pub fn new(level: &LabLevel, b: &Vector3) -> Self {
        let spectrum = diagonalize_unchecked(&level.hamiltonian(b));
        let n_hat = quantization_axis_lab(&level.g, b);

        let branch = std::array::from_fn(|n| match n_hat {
            None => Branch::Mixed,
            Some(axis) => {
                let p = 2.0 * spectrum.electron_spin(n).dot(&axis);
                if p >= BRANCH_POLARIZATION_MIN {
                    Branch::Upper
                } else if p <= -BRANCH_POLARIZATION_MIN {
                    Branch::Lower
                } else {
                    Branch::Mixed
                }
            }
        });

        // nuclear projections are counted along A·n̂ (lab z at zero field)
        let axis = n_hat
            .map(|n| level.a * n)
            .filter(|u| u.norm() > 1e-12)
            .map(|u| u.normalize())
            .unwrap_or_else(Vector3::z);
        let projector = nuclear_axis_states(&axis);
        let twice_m_i = std::array::from_fn(|n| {
            let rho = spectrum.nuclear_density(n);
            let mut best = (0usize, -1.0);
            for m in 0..NUCLEAR_DIM {
                let u = projector.column(m);
                let w = (u.adjoint() * rho * u)[(0, 0)].re;
                if w > best.1 {
                    best = (m, w);
                }
            }
            (best.1 >= DOMINANT_WEIGHT_MIN).then(|| 2 * best.0 as i32 - 7)
        });

        Self {
            spectrum,
            branch,
            twice_m_i,
        }
    }
}

/// Eigenvectors of `I·û`, columns ordered by ascending `m_I`.
fn nuclear_axis_states(axis: &Vector3) -> SMatrix<C64, 8, 8> {
    let [ix, iy, iz] = angular_momentum(NUCLEAR_SPIN);
    let op = SMatrix::<C64, 8, 8>::from_fn(|r, c| {
        ix[(r, c)] * axis.x + iy[(r, c)] * axis.y + iz[(r, c)] * axis.z
    });
    let eig = op.symmetric_eigen();
    let mut order: [usize; 8] = std::array::from_fn(|k| k);
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    SMatrix::<C64, 8, 8>::from_fn(|r, c| eig.eigenvectors[(r, order[c])])
}

/// Mapping from electron-branch combinations to group labels.
///
/// Labels are assigned in ascending frequency order of the four Zeeman-only
/// lines at 1 T along the Z1 g-tensor's principal z axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLabeling {
    /// Indexed by `[ground upper?][excited upper?]`.
    table: [[Group; 2]; 2],
}

impl GroupLabeling {
    pub fn reference(sys: &SystemParams) -> Self {
        let b = sys.z1.g.z_axis();
        let zg = CONSTANTS.mu_e_over_h * (sys.z1.g.lab_matrix() * b).norm();
        let ze = CONSTANTS.mu_e_over_h * (sys.yi.g.lab_matrix() * b).norm();
        let mut combos: Vec<(f64, usize, usize)> = Vec::with_capacity(4);
        for g_up in 0..2 {
            for e_up in 0..2 {
                let sg = g_up as f64 - 0.5;
                let se = e_up as f64 - 0.5;
                combos.push((se * ze - sg * zg, g_up, e_up));
            }
        }
        combos.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut table = [[Group::Mixed; 2]; 2];
        for (label, &(_, g_up, e_up)) in [Group::A, Group::B, Group::C, Group::D].iter().zip(&combos) {
            table[g_up][e_up] = *label;
        }
        Self { table }
    }

    pub fn label(&self, ground: Branch, excited: Branch) -> Group {
        let idx = |b: Branch| match b {
            Branch::Lower => Some(0),
            Branch::Upper => Some(1),
            Branch::Mixed => None,
        };
        match (idx(ground), idx(excited)) {
            (Some(g), Some(e)) => self.table[g][e],
            _ => Group::Mixed,
        }
    }

    /// Electron branches (ground upper?, excited upper?) of a group label.
    pub fn branches(&self, group: Group) -> Option<(bool, bool)> {
        for g in 0..2 {
            for e in 0..2 {
                if self.table[g][e] == group {
                    return Some((g == 1, e == 1));
                }
            }
        }
        None
    }
}

/// Group of the transition `ground_state → excited_state`.
pub fn classify_group(
    ground_state: usize,
    excited_state: usize,
    z1: &LevelAnalysis,
    yi: &LevelAnalysis,
    labeling: &GroupLabeling,
) -> Group {
    labeling.label(z1.branch[ground_state], yi.branch[excited_state])
}

fn delta_mi(ground: Option<i32>, excited: Option<i32>) -> DeltaMI {
    match (ground, excited) {
        (Some(g), Some(e)) => match e - g {
            0 => DeltaMI::Zero,
            2 => DeltaMI::Plus,
            -2 => DeltaMI::Minus,
            _ => DeltaMI::Other,
        },
        _ => DeltaMI::Other,
    }
}

/// Unnormalized overlap intensities, indexed `[ground][excited]`.
pub fn overlap_intensities(ground: &LevelSpectrum, excited: &LevelSpectrum) -> [[f64; DIM]; DIM] {
    let mut out = [[0.0; DIM]; DIM];
    let block = |v: &LevelSpectrum, s: usize| v.eigenvectors.fixed_rows::<8>(8 * s).into_owned();
    for s in 0..2 {
        let gs = block(ground, s);
        for sp in 0..2 {
            let es = block(excited, sp);
            let o = es.adjoint() * gs; // [excited][ground]
            for (g, row) in out.iter_mut().enumerate() {
                for (e, val) in row.iter_mut().enumerate() {
                    *val += o[(e, g)].norm_sqr();
                }
            }
        }
    }
    out
}

/// All 256 transitions at field `b`, ordered by ground then excited index.
pub fn compute_transitions(sys: &SystemParams, b: &FieldVector) -> Result<Vec<TransitionPeak>> {
    sys.validate()?;
    let z1 = LevelAnalysis::new(&sys.z1.lab()?, &b.vector());
    let yi = LevelAnalysis::new(&sys.yi.lab()?, &b.vector());
    let labeling = GroupLabeling::reference(sys);
    Ok(transitions_from(sys.f0, &z1, &yi, &labeling))
}

pub fn transitions_from(
    f0: f64,
    z1: &LevelAnalysis,
    yi: &LevelAnalysis,
    labeling: &GroupLabeling,
) -> Vec<TransitionPeak> {
    let raw = overlap_intensities(&z1.spectrum, &yi.spectrum);
    let max = raw.iter().flatten().copied().fold(0.0, f64::max);
    let norm = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut peaks = Vec::with_capacity(DIM * DIM);
    for (g, row) in raw.iter().enumerate() {
        for (e, &w) in row.iter().enumerate() {
            peaks.push(TransitionPeak {
                frequency: f0 + yi.spectrum.eigenvalues[e] - z1.spectrum.eigenvalues[g],
                intensity: w * norm,
                ground_index: g,
                excited_index: e,
                group: classify_group(g, e, z1, yi, labeling),
                delta_mi: delta_mi(z1.twice_m_i[g], yi.twice_m_i[e]),
            });
        }
    }
    peaks
}

/// A uniformly sampled spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumTrace {
    pub frequencies: Vec<f64>,
    pub signal: Vec<f64>,
}

impl SpectrumTrace {
    pub fn new(frequencies: Vec<f64>, signal: Vec<f64>) -> Result<Self> {
        if frequencies.is_empty() || frequencies.len() != signal.len() {
            return Err(invalid("trace must be non-empty with matching columns"));
        }
        let t = Self { frequencies, signal };
        t.check_uniform()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn step(&self) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        (self.frequencies[self.len() - 1] - self.frequencies[0]) / (self.len() - 1) as f64
    }

    fn check_uniform(&self) -> Result<()> {
        if self.len() < 2 {
            return Ok(());
        }
        let step = self.step();
        if !(step > 0.0) {
            return Err(invalid("frequency grid must be strictly increasing"));
        }
        let f0 = self.frequencies[0];
        let scale = f0.abs().max(step);
        for (k, f) in self.frequencies.iter().enumerate() {
            let want = f0 + k as f64 * step;
            if (f - want).abs() > 1e-9 * scale + 1e-6 * step {
                return Err(invalid(format!("grid not uniform at point {k}")));
            }
        }
        Ok(())
    }
}

/// Lorentzian line of unit height and full width `fwhm`.
pub fn lorentzian(f: f64, center: f64, fwhm: f64) -> f64 {
    let hw = 0.5 * fwhm;
    hw * hw / ((f - center).powi(2) + hw * hw)
}

/// Sum of Lorentzians `I_k (Γ/2)² / ((f − f_k)² + (Γ/2)²)` on a uniform grid.
pub fn synthesize_spectrum(
    peaks: &[TransitionPeak],
    grid_start: f64,
    grid_stop: f64,
    step: f64,
    fwhm: f64,
) -> Result<SpectrumTrace> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid("step must be positive"));
    }
    if !(fwhm > 0.0 && fwhm.is_finite()) {
        return Err(invalid("fwhm must be positive"));
    }
    if !(grid_stop >= grid_start) || !grid_start.is_finite() || !grid_stop.is_finite() {
        return Err(invalid("empty frequency grid"));
    }
    let n = ((grid_stop - grid_start) / step + 1e-9).floor() as usize + 1;
    let frequencies: Vec<f64> = (0..n).map(|k| grid_start + k as f64 * step).collect();
    let signal = frequencies
        .iter()
        .map(|&f| {
            peaks
                .iter()
                .map(|p| p.intensity * lorentzian(f, p.frequency, fwhm))
                .sum()
        })
        .collect();
    Ok(SpectrumTrace { frequencies, signal })
}
