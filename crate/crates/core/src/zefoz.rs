//! Zero first-order Zeeman (ZEFOZ) fields of hyperfine transitions within one
//! level, their curvatures, mixing regimes and coherence estimates.
//!
//! Levels are indexed by sorted eigenvalue at every field. A pair `(i, j)`
//! with `i < j` has frequency `f = E_j − E_i`.

use nalgebra::{SymmetricEigen, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hamiltonian::{
    diagonalize_unchecked, eigenvalues, quantization_axis_lab, LabLevel, LevelParams, Matrix16, C64, CONSTANTS, DIM,
    NUCLEAR_SPIN,
};
use crate::peaks::fibonacci_sphere;
use crate::tensor::{FieldVector, Matrix3, Vector3};

/// Below this level gap (GHz) individual eigenvectors are not trusted.
pub const DEGENERACY_GAP: f64 = 1e-6;
/// Below this gap (GHz) eigensolver round-off makes Hellmann–Feynman less
/// accurate than finite differences.
pub const HF_TRUST_GAP: f64 = 1e-4;
/// Step of the central differences used by the finite-difference paths (T).
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionGradient {
    /// GHz/T
    pub gradient: Vector3,
    /// True when a near-degeneracy forced the finite-difference path.
    pub finite_difference: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionHessian {
    /// Symmetrized, GHz/T².
    pub hessian: Matrix3,
    /// `‖H − Hᵀ‖/‖H‖` before symmetrization.
    pub asymmetry: f64,
    /// Step actually used (T).
    pub step: f64,
    /// True when the step adaptation did not settle.
    pub flagged: bool,
}

fn check_pair(i: usize, j: usize) -> Result<()> {
    if i >= DIM || j >= DIM || i == j {
        return Err(invalid(format!("invalid level pair ({i}, {j})")));
    }
    Ok(())
}

fn min_gap(e: &[f64], n: usize) -> f64 {
    let mut g = f64::INFINITY;
    if n > 0 {
        g = g.min(e[n] - e[n - 1]);
    }
    if n + 1 < DIM {
        g = g.min(e[n + 1] - e[n]);
    }
    g
}

/// Frequency `E_j − E_i` from the fast eigenvalue path.
pub fn transition_frequency(level: &LabLevel, b: &Vector3, i: usize, j: usize) -> f64 {
    let e = eigenvalues(&level.hamiltonian(b));
    e[j] - e[i]
}

/// Central-difference gradient of the sorted-eigenvalue frequency.
pub fn finite_difference_gradient(level: &LabLevel, b: &Vector3, i: usize, j: usize, step: f64) -> Vector3 {
    Vector3::from_fn(|k, _| {
        let mut d = Vector3::zeros();
        d[k] = step;
        (transition_frequency(level, &(b + d), i, j) - transition_frequency(level, &(b - d), i, j)) / (2.0 * step)
    })
}

/// Pair gradient, local gap, and the sum-over-states Hessian.
struct PairEval {
    gradient: Vector3,
    hessian: Matrix3,
    gap: f64,
}

fn eval_pair(level: &LabLevel, dv: &[Matrix16; 3], b: &Vector3, i: usize, j: usize) -> PairEval {
    let spectrum = diagonalize_unchecked(&level.hamiltonian(b));
    let e: [f64; DIM] = std::array::from_fn(|n| spectrum.eigenvalues[n]);
    let u = &spectrum.eigenvectors;
    let ut = u.adjoint();
    let mut grad = Vector3::zeros();
    let mut hess = Matrix3::zeros();
    for (n, sign) in [(j, 1.0), (i, -1.0)] {
        let col = u.column(n);
        // ⟨m|V_a|n⟩ for every m
        let m: [SVector<C64, DIM>; 3] = std::array::from_fn(|a| ut * (dv[a] * col));
        for a in 0..3 {
            grad[a] += sign * m[a][n].re;
        }
        for mm in 0..DIM {
            let de = e[n] - e[mm];
            if mm == n || de.abs() < 1e-12 {
                continue;
            }
            for a in 0..3 {
                for c in a..3 {
                    let v = 2.0 * (m[a][mm].conj() * m[c][mm]).re / de;
                    hess[(a, c)] += sign * v;
                }
            }
        }
    }
    for a in 0..3 {
        for c in 0..a {
            hess[(a, c)] = hess[(c, a)];
        }
    }
    PairEval {
        gradient: grad,
        hessian: hess,
        gap: min_gap(&e, i).min(min_gap(&e, j)),
    }
}

/// `∂f/∂B` by Hellmann–Feynman, falling back to finite differences of the
/// sorted eigenvalues when either level is within [`HF_TRUST_GAP`] of a
/// neighbour.
pub fn transition_gradient(z1: &LevelParams, b: &FieldVector, i: usize, j: usize) -> Result<TransitionGradient> {
    check_pair(i, j)?;
    let level = z1.lab()?;
    Ok(gradient_lab(&level, &level.field_derivatives(), &b.vector(), i, j))
}

fn gradient_lab(level: &LabLevel, dv: &[Matrix16; 3], b: &Vector3, i: usize, j: usize) -> TransitionGradient {
    let spectrum = diagonalize_unchecked(&level.hamiltonian(b));
    let e: [f64; DIM] = std::array::from_fn(|n| spectrum.eigenvalues[n]);
    if min_gap(&e, i).min(min_gap(&e, j)) < HF_TRUST_GAP {
        return TransitionGradient {
            gradient: finite_difference_gradient(level, b, i, j, FD_STEP),
            finite_difference: true,
        };
    }
    let grad = Vector3::from_fn(|a, _| spectrum.expectation_dense(&dv[a], j) - spectrum.expectation_dense(&dv[a], i));
    TransitionGradient {
        gradient: grad,
        finite_difference: false,
    }
}

/// Central differences of the gradient with step halving until two
/// successive estimates agree, then symmetrized.
pub fn transition_hessian(z1: &LevelParams, b: &FieldVector, i: usize, j: usize) -> Result<TransitionHessian> {
    check_pair(i, j)?;
    let level = z1.lab()?;
    Ok(hessian_lab(&level, &level.field_derivatives(), &b.vector(), i, j))
}

fn fd_hessian(level: &LabLevel, dv: &[Matrix16; 3], b: &Vector3, i: usize, j: usize, h: f64) -> Matrix3 {
    let mut m = Matrix3::zeros();
    for k in 0..3 {
        let mut d = Vector3::zeros();
        d[k] = h;
        let gp = gradient_lab(level, dv, &(b + d), i, j).gradient;
        let gm = gradient_lab(level, dv, &(b - d), i, j).gradient;
        m.set_column(k, &((gp - gm) / (2.0 * h)));
    }
    m
}

fn hessian_lab(level: &LabLevel, dv: &[Matrix16; 3], b: &Vector3, i: usize, j: usize) -> TransitionHessian {
    let mut h = 1e-4 * b.norm().max(0.1);
    let mut prev = fd_hessian(level, dv, b, i, j, h);
    let mut flagged = true;
    for _ in 0..8 {
        let next = fd_hessian(level, dv, b, i, j, 0.5 * h);
        let scale = next.norm().max(prev.norm()).max(1e-12);
        let close = (next - prev).norm() <= 1e-4 * scale;
        h *= 0.5;
        prev = next;
        if close {
            flagged = false;
            break;
        }
    }
    let norm = prev.norm();
    let asymmetry = if norm > 0.0 {
        (prev - prev.transpose()).norm() / norm
    } else {
        0.0
    };
    TransitionHessian {
        hessian: (prev + prev.transpose()) * 0.5,
        asymmetry,
        step: h,
        flagged,
    }
}

/// Largest-magnitude eigenvalue of a symmetric matrix, sign kept.
pub fn max_curvature(hessian: &Matrix3) -> f64 {
    let eig = SymmetricEigen::new(*hessian).eigenvalues;
    eig.iter().copied().fold(0.0, |acc: f64, v| if v.abs() > acc.abs() { v } else { acc })
}

/// Electronic Zeeman splitting `μe|gᵀB|` and hyperfine spread `2I·|A·n̂|` (GHz).
pub fn regime_scales(level: &LabLevel, b: &Vector3) -> (f64, f64) {
    let zeeman = CONSTANTS.mu_e_over_h * (level.g.transpose() * b).norm();
    let spread = match quantization_axis_lab(&level.g, b) {
        Some(n) => 2.0 * NUCLEAR_SPIN * (level.a * n).norm(),
        None => 0.0,
    };
    (zeeman, spread)
}

/// Weak mixing iff the Zeeman splitting exceeds `kappa` times the hyperfine spread.
pub fn classify_regime(z1: &LevelParams, b: &FieldVector, kappa: f64) -> Result<Regime> {
    let level = z1.lab()?;
    Ok(regime_lab(&level, &b.vector(), kappa))
}

fn regime_lab(level: &LabLevel, b: &Vector3, kappa: f64) -> Regime {
    let (z, spread) = regime_scales(level, b);
    if z > kappa * spread {
        Regime::Weak
    } else {
        Regime::Strong
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZefozPoint {
    #[serde(rename = "B_T")]
    pub field: FieldVector,
    pub pair: (usize, usize),
    #[serde(rename = "f_GHz")]
    pub frequency: f64,
    /// Finite-difference `‖∇f‖` at the reported field (GHz/T).
    #[serde(rename = "gradient_residual_GHz_per_T")]
    pub gradient_residual: f64,
    #[serde(rename = "hessian_GHz_per_T2")]
    pub hessian: [[f64; 3]; 3],
    #[serde(rename = "S2_max_GHz_per_T2")]
    pub s2_max: f64,
    pub regime: Regime,
    /// Hessian asymmetry before symmetrization.
    pub hessian_asymmetry: f64,
    /// Set when degeneracy handling or step adaptation was needed.
    pub flagged: bool,
}

impl ZefozPoint {
    pub fn magnitude(&self) -> f64 {
        self.field.magnitude()
    }

    pub fn hessian_matrix(&self) -> Matrix3 {
        Matrix3::from_fn(|r, c| self.hessian[r][c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZefozSearch {
    #[serde(rename = "b_max_T")]
    pub b_max: f64,
    #[serde(rename = "b_min_T")]
    pub b_min: f64,
    pub radii: usize,
    pub directions: usize,
    pub max_newton_steps: usize,
    /// Newton stopping tolerance on `‖∇f‖` (GHz/T).
    pub newton_tolerance: f64,
    /// Independent finite-difference acceptance threshold (GHz/T).
    pub verify_tolerance: f64,
    /// Points closer than this (T) are merged.
    pub dedup_distance: f64,
    pub kappa: f64,
    /// Restrict to these pairs; all 120 when empty.
    #[serde(default)]
    pub pairs: Vec<(usize, usize)>,
}

impl Default for ZefozSearch {
    fn default() -> Self {
        Self {
            b_max: 5.0,
            b_min: 1e-3,
            radii: 8,
            directions: 64,
            max_newton_steps: 60,
            newton_tolerance: 1e-7,
            verify_tolerance: 1e-4,
            dedup_distance: 1e-3,
            kappa: 3.0,
            pairs: Vec::new(),
        }
    }
}

impl ZefozSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_max > 0.0 && self.b_max.is_finite()) {
            return Err(invalid("b_max must be positive"));
        }
        if !(self.b_min > 0.0 && self.b_min <= self.b_max) {
            return Err(invalid("b_min must lie in (0, b_max]"));
        }
        if self.radii == 0 || self.directions < 2 {
            return Err(invalid("seed grid needs at least one radius and two directions"));
        }
        for &(i, j) in &self.pairs {
            check_pair(i, j)?;
        }
        Ok(())
    }

    /// Origin plus a log-radial × Fibonacci grid.
    pub fn seeds(&self) -> Result<Vec<Vector3>> {
        let dirs = fibonacci_sphere(self.directions)?;
        let mut out = vec![Vector3::zeros()];
        for r in 0..self.radii {
            let t = if self.radii == 1 { 1.0 } else { r as f64 / (self.radii - 1) as f64 };
            let mag = self.b_min * (self.b_max / self.b_min).powf(t);
            out.extend(dirs.iter().map(|d| d * mag));
        }
        Ok(out)
    }

    fn pair_list(&self) -> Vec<(usize, usize)> {
        if self.pairs.is_empty() {
            (0..DIM).flat_map(|i| (i + 1..DIM).map(move |j| (i, j))).collect()
        } else {
            let mut p: Vec<(usize, usize)> = self.pairs.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
            p.sort();
            p.dedup();
            p
        }
    }
}

/// Summary of a search for reporting coverage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub seeds_per_pair: usize,
    pub pairs: usize,
    pub converged: usize,
    pub rejected_by_verification: usize,
}

fn newton(level: &LabLevel, dv: &[Matrix16; 3], seed: &Vector3, i: usize, j: usize, cfg: &ZefozSearch) -> Option<Vector3> {
    let mut b = *seed;
    let mut checkpoint = f64::INFINITY;
    for step in 0..cfg.max_newton_steps {
        let ev = eval_pair(level, dv, &b, i, j);
        let gnorm = ev.gradient.norm();
        if gnorm < cfg.newton_tolerance {
            return Some(b);
        }
        if step % 15 == 0 {
            if gnorm > 0.9 * checkpoint {
                return None;
            }
            checkpoint = gnorm;
        }
        if ev.gap < DEGENERACY_GAP {
            return None;
        }
        let svd = ev.hessian.svd(true, true);
        let smax = svd.singular_values.max();
        let step = svd.solve(&(-ev.gradient), 1e-10 * smax.max(1e-300)).ok()?;
        let limit = if b.norm() < 0.05 { 0.01 } else { 0.2 * b.norm() };
        let n = step.norm();
        let step = if n > limit { step * (limit / n) } else { step };
        b += step;
        if !b.iter().all(|x| x.is_finite()) || b.norm() > 1.5 * cfg.b_max {
            return None;
        }
    }
    let ev = eval_pair(level, dv, &b, i, j);
    (ev.gradient.norm() < cfg.newton_tolerance).then_some(b)
}

fn build_point(level: &LabLevel, dv: &[Matrix16; 3], b: &Vector3, i: usize, j: usize, kappa: f64) -> ZefozPoint {
    let grad = gradient_lab(level, dv, b, i, j);
    let hess = hessian_lab(level, dv, b, i, j);
    let residual = finite_difference_gradient(level, b, i, j, FD_STEP).norm();
    let field = FieldVector::from_vector(*b).expect("finite field");
    ZefozPoint {
        field,
        pair: (i, j),
        frequency: transition_frequency(level, b, i, j),
        gradient_residual: residual,
        hessian: std::array::from_fn(|r| std::array::from_fn(|c| hess.hessian[(r, c)])),
        s2_max: max_curvature(&hess.hessian),
        regime: regime_lab(level, b, kappa),
        hessian_asymmetry: hess.asymmetry,
        flagged: grad.finite_difference || hess.flagged,
    }
}

/// Newton search for stationary points of every requested pair frequency
/// from every seed, verified by finite differences, deduplicated and closed
/// under `B → −B`. Output is ordered by pair, then `|B|`.
pub fn find_zefoz(level: &LevelParams, search: &ZefozSearch) -> Result<(Vec<ZefozPoint>, SearchStats)> {
    search.validate()?;
    let lab = level.lab()?;
    let dv = lab.field_derivatives();
    let seeds = search.seeds()?;
    let pairs = search.pair_list();

    let per_pair: Vec<(Vec<ZefozPoint>, usize, usize)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut found: Vec<Vector3> = Vec::new();
            let mut converged = 0;
            for s in &seeds {
                if let Some(b) = newton(&lab, &dv, s, i, j, search) {
                    converged += 1;
                    if b.norm() <= search.b_max {
                        found.push(b);
                    }
                }
            }
            // origin is stationary by evenness; keep it whatever the seeds did
            found.push(Vector3::zeros());
            let mut merged: Vec<Vector3> = Vec::new();
            found.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(lex(a, b)));
            for b in found {
                let b = if b.norm() < 0.5 * search.dedup_distance { Vector3::zeros() } else { b };
                for cand in [b, -b] {
                    if !merged.iter().any(|m| (m - cand).norm() < search.dedup_distance) {
                        merged.push(cand);
                    }
                }
            }
            let mut rejected = 0;
            let mut points = Vec::new();
            for b in merged {
                let p = build_point(&lab, &dv, &b, i, j, search.kappa);
                if p.gradient_residual < search.verify_tolerance {
                    points.push(p);
                } else {
                    rejected += 1;
                }
            }
            points.sort_by(|a, b| {
                a.magnitude()
                    .total_cmp(&b.magnitude())
                    .then(lex(&a.field.vector(), &b.field.vector()))
            });
            (points, converged, rejected)
        })
        .collect();

    let mut stats = SearchStats {
        seeds_per_pair: seeds.len(),
        pairs: pairs.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for (points, converged, rejected) in per_pair {
        stats.converged += converged;
        stats.rejected_by_verification += rejected;
        out.extend(points);
    }
    Ok((out, stats))
}

fn lex(a: &Vector3, b: &Vector3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceEstimate {
    #[serde(rename = "rate_Hz")]
    pub rate: f64,
    /// `None` stands for an infinite T2 (zero curvature).
    #[serde(rename = "T2_s")]
    pub t2: Option<f64>,
    #[serde(rename = "deltaB_mT")]
    pub delta_b_mt: f64,
}

/// `rate = |S2_max|·ΔB²`, converting GHz/T² and mT to Hz.
pub fn estimate_coherence(point: &ZefozPoint, delta_b_mt: f64) -> Result<CoherenceEstimate> {
    coherence_from_curvature(point.s2_max, delta_b_mt)
}

pub fn coherence_from_curvature(s2_ghz_per_t2: f64, delta_b_mt: f64) -> Result<CoherenceEstimate> {
    if !(delta_b_mt > 0.0 && delta_b_mt.is_finite()) {
        return Err(invalid("deltaB must be positive"));
    }
    let delta_b_t = delta_b_mt * 1e-3;
    let rate = s2_ghz_per_t2.abs() * 1e9 * delta_b_t * delta_b_t;
    Ok(CoherenceEstimate {
        rate,
        t2: (rate > 0.0).then(|| 1.0 / rate),
        delta_b_mt,
    })
}
