//! Effective spin Hamiltonian of one Kramers doublet (S = 1/2) coupled to the
//! I = 7/2 nucleus:
//!
//! `H = μe B·g·S + I·A·S + I·Q·I − μn gn B·I`, energies in GHz.
//!
//! The 16-dimensional product basis is `|m_S⟩ ⊗ |m_I⟩` with both projections
//! in ascending order, so index `8·s + m` holds `m_S = s − 1/2` and
//! `m_I = m − 7/2`.

use std::sync::OnceLock;

use nalgebra::{Complex, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{FieldVector, Matrix3, PrincipalTensor, Vector3};

pub type C64 = Complex<f64>;
pub type Matrix16 = SMatrix<C64, 16, 16>;
pub type HermitianMatrix16 = Matrix16;

pub const DIM: usize = 16;
pub const NUCLEAR_SPIN: f64 = 3.5;
pub const NUCLEAR_DIM: usize = 8;

/// Physical constants in frequency units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Bohr magneton over h, GHz/T.
    pub mu_e_over_h: f64,
    /// Nuclear magneton over h, GHz/T.
    pub mu_n_over_h: f64,
    /// Nuclear g factor of 167Er.
    pub g_n: f64,
}

impl PhysicalConstants {
    pub const ER167: Self = Self {
        mu_e_over_h: 13.9962449,
        mu_n_over_h: 7.622593e-3,
        g_n: -0.1618,
    };

    /// `μn·gn` in GHz/T.
    pub fn nuclear_zeeman(&self) -> f64 {
        self.mu_n_over_h * self.g_n
    }
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::ER167
    }
}

pub const CONSTANTS: PhysicalConstants = PhysicalConstants::ER167;

/// Spin-Hamiltonian parameters of one crystal-field level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub g: PrincipalTensor,
    #[serde(rename = "A")]
    pub a: PrincipalTensor,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<PrincipalTensor>,
}

impl LevelParams {
    pub fn new(g: PrincipalTensor, a: PrincipalTensor) -> Self {
        Self { g, a, q: None }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.g.is_finite()
            && self.a.is_finite()
            && self.q.as_ref().is_none_or(PrincipalTensor::is_finite);
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("non-finite level parameters {self:?}")))
        }
    }

    /// Laboratory-frame matrices, validated.
    pub fn lab(&self) -> Result<LabLevel> {
        self.validate()?;
        Ok(LabLevel::from_params(self))
    }
}

/// Laboratory-frame tensors of one level, ready for repeated Hamiltonian builds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabLevel {
    pub g: Matrix3,
    pub a: Matrix3,
    /// Traceless part of Q.
    pub q: Option<Matrix3>,
}

impl LabLevel {
    pub fn from_params(p: &LevelParams) -> Self {
        let q = p.q.map(|q| {
            let m = q.lab_matrix();
            m - Matrix3::identity() * (m.trace() / 3.0)
        });
        Self {
            g: p.g.lab_matrix(),
            a: p.a.lab_matrix(),
            q,
        }
    }

    pub fn hamiltonian(&self, b: &Vector3) -> Matrix16 {
        let ops = SpinOperators::get();
        let mu_e = CONSTANTS.mu_e_over_h;
        let nz = CONSTANTS.nuclear_zeeman();
        let mut h = Matrix16::zeros();
        // B·g·S: coefficient of S_k is μe Σ_j B_j g_jk
        let gb = self.g.transpose() * b;
        for k in 0..3 {
            ops.s[k].add_scaled_to(&mut h, mu_e * gb[k]);
            ops.i[k].add_scaled_to(&mut h, -nz * b[k]);
        }
        for j in 0..3 {
            for k in 0..3 {
                ops.is[j][k].add_scaled_to(&mut h, self.a[(j, k)]);
            }
        }
        if let Some(q) = &self.q {
            for j in 0..3 {
                for k in 0..3 {
                    ops.ii[j][k].add_scaled_to(&mut h, q[(j, k)]);
                }
            }
        }
        // exact Hermiticity regardless of rounding in the accumulation
        (h + h.adjoint()).scale(0.5)
    }

    /// `∂H/∂B_k = μe (g·S)_k − μn gn I_k`.
    pub fn field_derivatives(&self) -> [Matrix16; 3] {
        let ops = SpinOperators::get();
        let nz = CONSTANTS.nuclear_zeeman();
        std::array::from_fn(|k| {
            let mut d = Matrix16::zeros();
            for j in 0..3 {
                ops.s[j].add_scaled_to(&mut d, CONSTANTS.mu_e_over_h * self.g[(k, j)]);
            }
            ops.i[k].add_scaled_to(&mut d, -nz);
            d
        })
    }
}

/// A sparse operator on the 16-dimensional product space.
#[derive(Clone, Debug)]
pub struct SparseOp {
    entries: Vec<(usize, usize, C64)>,
}

impl SparseOp {
    fn from_dense(m: &Matrix16) -> Self {
        let mut entries = Vec::new();
        for c in 0..DIM {
            for r in 0..DIM {
                if m[(r, c)].norm() > 0.0 {
                    entries.push((r, c, m[(r, c)]));
                }
            }
        }
        Self { entries }
    }

    pub fn add_scaled_to(&self, h: &mut Matrix16, scale: f64) {
        if scale == 0.0 {
            return;
        }
        for &(r, c, v) in &self.entries {
            h[(r, c)] += v * scale;
        }
    }

    /// `Re ⟨u|O|v⟩` for column vectors given as slices.
    pub fn expectation(&self, v: &[C64]) -> f64 {
        let mut acc = C64::new(0.0, 0.0);
        for &(r, c, o) in &self.entries {
            acc += v[r].conj() * o * v[c];
        }
        acc.re
    }

    pub fn to_dense(&self) -> Matrix16 {
        let mut m = Matrix16::zeros();
        self.add_scaled_to(&mut m, 1.0);
        m
    }
}

/// Angular-momentum matrices for spin `j` in the ascending-m basis.
pub fn angular_momentum(j: f64) -> [nalgebra::DMatrix<C64>; 3] {
    let n = (2.0 * j).round() as usize + 1;
    let mut jp = nalgebra::DMatrix::<C64>::zeros(n, n);
    let mut jz = nalgebra::DMatrix::<C64>::zeros(n, n);
    for a in 0..n {
        let m = a as f64 - j;
        jz[(a, a)] = C64::new(m, 0.0);
        if a + 1 < n {
            jp[(a + 1, a)] = C64::new((j * (j + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
        }
    }
    let jm = jp.adjoint();
    let jx = (&jp + &jm) * C64::new(0.5, 0.0);
    let jy = (&jp - &jm) * C64::new(0.0, -0.5);
    [jx, jy, jz]
}

fn kron(a: &nalgebra::DMatrix<C64>, b: &nalgebra::DMatrix<C64>) -> Matrix16 {
    let k = a.kronecker(b);
    Matrix16::from_fn(|r, c| k[(r, c)])
}

/// The operator basis the Hamiltonian is assembled from.
pub struct SpinOperators {
    /// `S_k ⊗ 1`
    pub s: [SparseOp; 3],
    /// `1 ⊗ I_k`
    pub i: [SparseOp; 3],
    /// `I_j S_k`
    pub is: [[SparseOp; 3]; 3],
    /// `1 ⊗ I_j I_k`
    pub ii: [[SparseOp; 3]; 3],
}

impl SpinOperators {
    pub fn get() -> &'static SpinOperators {
        static OPS: OnceLock<SpinOperators> = OnceLock::new();
        OPS.get_or_init(Self::build)
    }

    fn build() -> Self {
        let sm = angular_momentum(0.5);
        let im = angular_momentum(NUCLEAR_SPIN);
        let id2 = nalgebra::DMatrix::<C64>::identity(2, 2);
        let id8 = nalgebra::DMatrix::<C64>::identity(8, 8);
        let s: [Matrix16; 3] = std::array::from_fn(|k| kron(&sm[k], &id8));
        let i: [Matrix16; 3] = std::array::from_fn(|k| kron(&id2, &im[k]));
        Self {
            s: std::array::from_fn(|k| SparseOp::from_dense(&s[k])),
            i: std::array::from_fn(|k| SparseOp::from_dense(&i[k])),
            is: std::array::from_fn(|j| {
                std::array::from_fn(|k| SparseOp::from_dense(&(i[j] * s[k])))
            }),
            ii: std::array::from_fn(|j| {
                std::array::from_fn(|k| SparseOp::from_dense(&(i[j] * i[k])))
            }),
        }
    }
}

/// `H(params, B)`.
pub fn build_hamiltonian(params: &LevelParams, b: &FieldVector) -> Result<HermitianMatrix16> {
    Ok(params.lab()?.hamiltonian(&b.vector()))
}

/// Exact `∂H/∂B_x, ∂H/∂B_y, ∂H/∂B_z`.
pub fn field_derivative_operators(params: &LevelParams) -> Result<[HermitianMatrix16; 3]> {
    Ok(params.lab()?.field_derivatives())
}

/// Sorted eigen-decomposition of one level Hamiltonian.
#[derive(Clone, Debug)]
pub struct LevelSpectrum {
    /// Ascending, GHz.
    pub eigenvalues: SVector<f64, 16>,
    /// Column `n` is the eigenvector of `eigenvalues[n]`.
    pub eigenvectors: Matrix16,
}

impl LevelSpectrum {
    pub fn state(&self, n: usize) -> &[C64] {
        let start = n * DIM;
        &self.eigenvectors.as_slice()[start..start + DIM]
    }

    pub fn expectation(&self, op: &SparseOp, n: usize) -> f64 {
        op.expectation(self.state(n))
    }

    pub fn expectation_dense(&self, op: &Matrix16, n: usize) -> f64 {
        let v = self.eigenvectors.column(n);
        (v.adjoint() * op * v)[(0, 0)].re
    }

    /// `⟨S⟩` of state `n` in laboratory axes.
    pub fn electron_spin(&self, n: usize) -> Vector3 {
        let ops = SpinOperators::get();
        Vector3::from_fn(|k, _| self.expectation(&ops.s[k], n))
    }

    /// Reduced nuclear density matrix of state `n`.
    pub fn nuclear_density(&self, n: usize) -> SMatrix<C64, 8, 8> {
        let v = self.state(n);
        SMatrix::<C64, 8, 8>::from_fn(|a, b| {
            (0..2)
                .map(|s| v[8 * s + a] * v[8 * s + b].conj())
                .fold(C64::new(0.0, 0.0), |x, y| x + y)
        })
    }
}

fn hermiticity_error(h: &Matrix16) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..DIM {
        for c in r..DIM {
            worst = worst.max((h[(r, c)] - h[(c, r)].conj()).norm());
        }
    }
    worst
}

fn max_abs(h: &Matrix16) -> f64 {
    h.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

/// Sorted eigenpairs with each eigenvector's largest-magnitude component made
/// real and positive.
pub fn diagonalize(h: &HermitianMatrix16) -> Result<LevelSpectrum> {
    if h.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
        return Err(invalid("non-finite Hamiltonian"));
    }
    if hermiticity_error(h) > 1e-9 * max_abs(h).max(1.0) {
        return Err(invalid("matrix is not Hermitian"));
    }
    Ok(diagonalize_unchecked(h))
}

pub(crate) fn diagonalize_unchecked(h: &Matrix16) -> LevelSpectrum {
    let eig = h.symmetric_eigen();
    let mut order: [usize; DIM] = std::array::from_fn(|k| k);
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = SVector::<f64, 16>::from_fn(|k, _| eig.eigenvalues[order[k]]);
    let mut eigenvectors = Matrix16::zeros();
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut best = 0;
        let mut best_mag = -1.0;
        for r in 0..DIM {
            let m = col[r].norm();
            if m > best_mag * (1.0 + 1e-12) {
                best = r;
                best_mag = m;
            }
        }
        let phase = col[best].conj() / best_mag;
        eigenvectors.set_column(dst, &(col * phase));
    }
    LevelSpectrum {
        eigenvalues,
        eigenvectors,
    }
}

/// Sorted eigenvalues only; the fast path used by fit objectives.
pub fn eigenvalues(h: &Matrix16) -> [f64; DIM] {
    let ev = h.symmetric_eigenvalues();
    let mut out: [f64; DIM] = std::array::from_fn(|k| ev[k]);
    out.sort_by(f64::total_cmp);
    out
}

/// Electron-spin quantization axis `B·g / |B·g|`.
pub fn quantization_axis(g: &PrincipalTensor, b: &FieldVector) -> Result<Vector3> {
    if !g.is_finite() {
        return Err(invalid("non-finite g tensor"));
    }
    quantization_axis_lab(&g.lab_matrix(), &b.vector()).ok_or(Error::DegenerateAxis)
}

pub(crate) fn quantization_axis_lab(g: &Matrix3, b: &Vector3) -> Option<Vector3> {
    let bg = g.transpose() * b;
    let n = bg.norm();
    (n > 0.0).then(|| bg / n)
}

/// `|A·n̂|`, the first-order hyperfine splitting per unit `m_I`.
pub fn effective_hyperfine_splitting(a: &PrincipalTensor, n_hat: &Vector3) -> Result<f64> {
    if !a.is_finite() || n_hat.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite input"));
    }
    if (n_hat.norm() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("n̂ is not a unit vector (|n̂| = {})", n_hat.norm())));
    }
    Ok((a.lab_matrix() * n_hat).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::tensor::EulerAngles;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, scale: f64) -> PrincipalTensor {
        PrincipalTensor::new(
            [
                rng.random_range(0.1..1.0) * scale,
                rng.random_range(0.1..1.0) * scale,
                rng.random_range(0.1..1.0) * scale,
            ],
            EulerAngles::new(
                rng.random_range(-180.0..180.0),
                rng.random_range(-180.0..180.0),
                rng.random_range(-180.0..180.0),
            ),
        )
    }

    fn random_level(rng: &mut ChaCha8Rng) -> LevelParams {
        let mut p = LevelParams::new(random_tensor(rng, 15.0), random_tensor(rng, 1.5));
        if rng.random_bool(0.5) {
            p.q = Some(random_tensor(rng, 0.01));
        }
        p
    }

    fn random_field(rng: &mut ChaCha8Rng, scale: f64) -> FieldVector {
        FieldVector::new(
            rng.random_range(-1.0..1.0) * scale,
            rng.random_range(-1.0..1.0) * scale,
            rng.random_range(-1.0..1.0) * scale,
        )
        .unwrap()
    }

    #[test]
    fn spin_operators_commutation() {
        for j in [0.5, 3.5] {
            let [x, y, z] = angular_momentum(j);
            let comm = &x * &y - &y * &x;
            let iz = &z * C64::new(0.0, 1.0);
            assert!((comm - iz).iter().all(|c| c.norm() < 1e-12));
            let casimir = &x * &x + &y * &y + &z * &z;
            for a in 0..casimir.nrows() {
                assert_abs_diff_eq!(casimir[(a, a)].re, j * (j + 1.0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn isotropic_hyperfine_zero_field() {
        let a = 1.3;
        let p = LevelParams::new(PrincipalTensor::isotropic(2.0), PrincipalTensor::isotropic(a));
        let h = build_hamiltonian(&p, &FieldVector::zero()).unwrap();
        let spec = diagonalize(&h).unwrap();
        let ev = spec.eigenvalues;
        for k in 0..7 {
            assert_abs_diff_eq!(ev[k], -2.25 * a, epsilon = 1e-12);
        }
        for k in 7..16 {
            assert_abs_diff_eq!(ev[k], 1.75 * a, epsilon = 1e-12);
        }
    }

    #[test]
    fn pure_zeeman_splitting_along_gz() {
        let g = presets::er_si_z1().g;
        let p = LevelParams::new(g, PrincipalTensor::zero());
        let b = FieldVector::along(&g.z_axis(), 0.4).unwrap();
        let ev = diagonalize(&build_hamiltonian(&p, &b).unwrap()).unwrap().eigenvalues;
        let lower: f64 = (0..8).map(|k| ev[k]).sum::<f64>() / 8.0;
        let upper: f64 = (8..16).map(|k| ev[k]).sum::<f64>() / 8.0;
        let want = CONSTANTS.mu_e_over_h * 14.846 * 0.4;
        assert_abs_diff_eq!(upper - lower, want, epsilon = 1e-9);
        assert_abs_diff_eq!(want, 83.12, epsilon = 0.01);
    }

    #[test]
    fn block_structure_without_hyperfine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = LevelParams::new(random_tensor(&mut rng, 10.0), PrincipalTensor::zero());
            let b = random_field(&mut rng, 2.0);
            let ev = diagonalize(&build_hamiltonian(&p, &b).unwrap()).unwrap().eigenvalues;
            let ez = CONSTANTS.mu_e_over_h * (p.g.lab_matrix() * b.vector()).norm();
            let nz = CONSTANTS.nuclear_zeeman() * b.magnitude();
            let mut want: Vec<f64> = [-0.5, 0.5]
                .iter()
                .flat_map(|s| (0..8).map(move |m| s * ez - nz * (m as f64 - 3.5)))
                .collect();
            want.sort_by(f64::total_cmp);
            for k in 0..16 {
                assert_abs_diff_eq!(ev[k], want[k], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn spectrum_even_in_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = random_level(&mut rng);
            let b = random_field(&mut rng, 1.0);
            let plus = eigenvalues(&build_hamiltonian(&p, &b).unwrap());
            let minus = eigenvalues(&build_hamiltonian(&p, &(-b)).unwrap());
            for k in 0..16 {
                assert_abs_diff_eq!(plus[k], minus[k], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn hermitian_by_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_level(&mut rng);
        let h = build_hamiltonian(&p, &random_field(&mut rng, 1.0)).unwrap();
        assert_eq!(hermiticity_error(&h), 0.0);
    }

    #[test]
    fn hyperfine_index_order_is_immaterial_for_symmetric_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_level(&mut rng);
        let b = random_field(&mut rng, 0.5).vector();
        let lab = p.lab().unwrap();
        let ops = SpinOperators::get();
        // Σ_jk I_k A_jk S_j against the implemented Σ_jk I_j A_jk S_k
        let mut transposed = lab;
        transposed.a = Matrix3::zeros();
        let mut h = transposed.hamiltonian(&b);
        for j in 0..3 {
            for k in 0..3 {
                ops.is[k][j].add_scaled_to(&mut h, lab.a[(j, k)]);
            }
        }
        let diff = (h - lab.hamiltonian(&b)).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-14);
    }

    #[test]
    fn diagonalize_diagonal() {
        let mut h = Matrix16::zeros();
        for k in 0..16 {
            h[(k, k)] = C64::new(k as f64 * 0.5 - 3.0, 0.0);
        }
        let sp = diagonalize(&h).unwrap();
        for k in 0..16 {
            assert_eq!(sp.eigenvalues[k], k as f64 * 0.5 - 3.0);
            for r in 0..16 {
                let want = if r == k { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(sp.eigenvectors[(r, k)].re, want, epsilon = 1e-14);
                assert_abs_diff_eq!(sp.eigenvectors[(r, k)].im, 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn diagonalize_embedded_block() {
        let mut h = Matrix16::zeros();
        h[(3, 4)] = C64::new(1.0, 0.0);
        h[(4, 3)] = C64::new(1.0, 0.0);
        let ev = diagonalize(&h).unwrap().eigenvalues;
        assert_abs_diff_eq!(ev[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ev[15], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut h = Matrix16::zeros();
        h[(0, 1)] = C64::new(1.0, 0.0);
        assert!(diagonalize(&h).is_err());
    }

    #[test]
    fn random_hermitian_reconstruction_and_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut h = Matrix16::zeros();
        for r in 0..16 {
            h[(r, r)] = C64::new(rng.random_range(-1.0..1.0), 0.0);
            for c in 0..r {
                let z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                h[(r, c)] = z;
                h[(c, r)] = z.conj();
            }
        }
        let sp = diagonalize(&h).unwrap();
        let mut rebuilt = Matrix16::zeros();
        for n in 0..16 {
            let v = sp.eigenvectors.column(n);
            rebuilt += v * v.adjoint() * C64::new(sp.eigenvalues[n], 0.0);
            let (idx, _) = v
                .iter()
                .enumerate()
                .fold((0, -1.0), |(bi, bm), (i, z)| if z.norm() > bm { (i, z.norm()) } else { (bi, bm) });
            assert!(v[idx].im.abs() < 1e-14 && v[idx].re > 0.0);
            let hv = h * v;
            let resid = (hv - v * C64::new(sp.eigenvalues[n], 0.0)).norm();
            assert!(resid < 1e-9 * h.norm());
        }
        let err = (rebuilt - h).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(err < 1e-9);
        let gram = sp.eigenvectors.adjoint() * sp.eigenvectors;
        let orth = (gram - Matrix16::identity()).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(orth < 1e-10);
        for k in 1..16 {
            assert!(sp.eigenvalues[k] >= sp.eigenvalues[k - 1]);
        }
    }

    #[test]
    fn derivative_operator_isotropic_g() {
        let p = LevelParams::new(PrincipalTensor::isotropic(2.0), PrincipalTensor::zero());
        let d = field_derivative_operators(&p).unwrap();
        let ops = SpinOperators::get();
        let want = ops.s[2].to_dense() * C64::new(2.0 * CONSTANTS.mu_e_over_h, 0.0)
            - ops.i[2].to_dense() * C64::new(CONSTANTS.nuclear_zeeman(), 0.0);
        let diff = (d[2] - want).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-14);
    }

    #[test]
    fn hamiltonian_is_linear_in_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = random_level(&mut rng);
            let b = random_field(&mut rng, 3.0);
            let d = field_derivative_operators(&p).unwrap();
            let h0 = build_hamiltonian(&p, &FieldVector::zero()).unwrap();
            let hb = build_hamiltonian(&p, &b).unwrap();
            let v = b.vector();
            let lin = h0 + d[0] * C64::new(v.x, 0.0) + d[1] * C64::new(v.y, 0.0) + d[2] * C64::new(v.z, 0.0);
            let diff = (hb - lin).iter().map(|c| c.norm()).fold(0.0, f64::max);
            assert!(diff < 1e-12 * max_abs(&hb).max(1.0));
        }
    }

    #[test]
    fn derivative_operator_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = random_level(&mut rng);
        let b = random_field(&mut rng, 0.5).vector();
        let d = field_derivative_operators(&p).unwrap();
        let delta = 1e-6;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = delta;
            let hp = build_hamiltonian(&p, &FieldVector::from_vector(b + e).unwrap()).unwrap();
            let hm = build_hamiltonian(&p, &FieldVector::from_vector(b - e).unwrap()).unwrap();
            let fd = (hp - hm) / C64::new(2.0 * delta, 0.0);
            let scale = max_abs(&d[k]);
            let diff = (fd - d[k]).iter().map(|c| c.norm()).fold(0.0, f64::max);
            assert!(diff < 1e-6 * scale, "{diff} vs {scale}");
        }
    }

    #[test]
    fn quantization_axis_cases() {
        let iso = PrincipalTensor::isotropic(2.0);
        let n = quantization_axis(&iso, &FieldVector::new(0.0, 0.0, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(n, Vector3::z(), epsilon = 1e-15);

        let g = presets::er_si_z1().g;
        let n = quantization_axis(&g, &FieldVector::along(&g.z_axis(), 0.4).unwrap()).unwrap();
        assert_abs_diff_eq!(n, g.z_axis(), epsilon = 1e-9);

        // 45° between principal z and x: n̂ lies at atan2(gx, gz) from z
        let dir = (g.z_axis() + g.x_axis()) / 2f64.sqrt();
        let n = quantization_axis(&g, &FieldVector::along(&dir, 0.4).unwrap()).unwrap();
        let tilt = n.dot(&g.x_axis()).atan2(n.dot(&g.z_axis()));
        assert_abs_diff_eq!(tilt, g.vx().atan2(g.vz()), epsilon = 1e-12);
        assert_abs_diff_eq!(n.dot(&g.y_axis()), 0.0, epsilon = 1e-12);

        assert!(matches!(quantization_axis(&g, &FieldVector::zero()), Err(Error::DegenerateAxis)));
    }

    #[test]
    fn effective_hyperfine_cases() {
        let iso = PrincipalTensor::isotropic(0.7);
        let n = Vector3::new(1.0, 2.0, -0.5).normalize();
        assert_abs_diff_eq!(effective_hyperfine_splitting(&iso, &n).unwrap(), 0.7, epsilon = 1e-14);

        let a = presets::er_si_z1().a;
        assert_abs_diff_eq!(effective_hyperfine_splitting(&a, &a.z_axis()).unwrap(), 1.558, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            let s = effective_hyperfine_splitting(&a, &n).unwrap();
            assert!(s >= a.vx() - 1e-12 && s <= a.vz() + 1e-12);
        }
        assert!(effective_hyperfine_splitting(&a, &Vector3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn high_field_gaps_converge_to_first_order() {
        let z1 = presets::er_si_z1();
        let lab = z1.lab().unwrap();
        let mut previous = f64::INFINITY;
        for bmag in [1.0, 10.0, 100.0] {
            let b = z1.g.z_axis() * bmag;
            let ev = eigenvalues(&lab.hamiltonian(&b));
            let n = quantization_axis_lab(&lab.g, &b).unwrap();
            // upper branch: nuclear field m_S·A·n̂ − μn gn B with m_S = +1/2
            let first_order = (lab.a * n * 0.5 - b * CONSTANTS.nuclear_zeeman()).norm();
            let dev = (8..15)
                .map(|k| ((ev[k + 1] - ev[k]) - first_order).abs())
                .fold(0.0, f64::max);
            assert!(dev < previous, "deviation {dev} at {bmag} T did not shrink");
            previous = dev;
        }
        assert!(previous < 1e-4);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = presets::er_si_z1();
        p.a.values[1] = f64::NAN;
        assert!(build_hamiltonian(&p, &FieldVector::zero()).is_err());
        assert!(field_derivative_operators(&p).is_err());
    }
}
