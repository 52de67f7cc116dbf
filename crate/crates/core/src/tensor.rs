//! Anisotropic interaction tensors in principal-axis form.
//!
//! A tensor is stored as three principal values plus a z–y′–z″ Euler triple.
//! The laboratory-frame matrix is `M = Rᵀ · diag(vx, vy, vz) · R` with
//! `R = R_z(γ) · R_y(β) · R_z(α)`, where each factor is a passive (frame)
//! rotation. The rows of `R` are the principal x, y and z axes expressed in
//! laboratory coordinates, so the principal z axis points along
//! `(sin β cos α, sin β sin α, cos β)`.
//!
//! `(α, β, γ)` and `(α + 180°, −β, γ + 180°)` describe the same matrix, and so
//! does `γ + 180°` on its own; [`lab_to_principal`] picks a single
//! representative (β ∈ [0°, 90°], γ ∈ (−90°, 90°]).

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Matrix3 = nalgebra::Matrix3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;

/// Wraps an angle in degrees into (−180, 180].
pub fn wrap_degrees(angle: f64) -> f64 {
    let r = angle.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// z–y′–z″ Euler angles, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerAngles {
    /// Builds a normalized triple. Non-finite input is passed through
    /// unchanged so that [`rotate_to_lab`] can reject it.
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        let norm = |a: f64| if a.is_finite() { wrap_degrees(a) } else { a };
        Self {
            alpha: norm(alpha),
            beta: norm(beta),
            gamma: norm(gamma),
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Angles without wrapping; used by optimizers that move angles freely.
    pub fn raw(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()
    }

    /// The other triple of the double cover, `(α + 180°, −β, γ + 180°)`.
    pub fn gauge_partner(&self) -> Self {
        Self::new(self.alpha + 180.0, -self.beta, self.gamma + 180.0)
    }

    /// `R = R_z(γ) · R_y(β) · R_z(α)`.
    pub fn rotation(&self) -> Matrix3 {
        let (a, b, g) = (
            self.alpha.to_radians(),
            self.beta.to_radians(),
            self.gamma.to_radians(),
        );
        rot_z(g) * rot_y(b) * rot_z(a)
    }

    /// Derivatives of [`rotation`](Self::rotation) per degree of α, β and γ.
    pub fn rotation_derivatives(&self) -> [Matrix3; 3] {
        let (a, b, g) = (
            self.alpha.to_radians(),
            self.beta.to_radians(),
            self.gamma.to_radians(),
        );
        let k = std::f64::consts::PI / 180.0;
        [
            rot_z(g) * rot_y(b) * rot_z_prime(a) * k,
            rot_z(g) * rot_y_prime(b) * rot_z(a) * k,
            rot_z_prime(g) * rot_y(b) * rot_z(a) * k,
        ]
    }
}

impl TryFrom<[f64; 3]> for EulerAngles {
    type Error = String;

    fn try_from(v: [f64; 3]) -> std::result::Result<Self, String> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(Self::new(v[0], v[1], v[2]))
        } else {
            Err(format!("non-finite Euler angles {v:?}"))
        }
    }
}

impl From<EulerAngles> for [f64; 3] {
    fn from(e: EulerAngles) -> Self {
        [e.alpha, e.beta, e.gamma]
    }
}

fn rot_z(t: f64) -> Matrix3 {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_y(t: f64) -> Matrix3 {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

fn rot_z_prime(t: f64) -> Matrix3 {
    let (s, c) = t.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn rot_y_prime(t: f64) -> Matrix3 {
    let (s, c) = t.sin_cos();
    Matrix3::new(-s, 0.0, -c, 0.0, 0.0, 0.0, c, 0.0, -s)
}

/// A symmetric 3×3 tensor given by principal values and orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalTensor {
    /// `[vz, vy, vx]`.
    #[serde(rename = "values_zyx")]
    pub values: [f64; 3],
    #[serde(rename = "euler_deg")]
    pub angles: EulerAngles,
}

impl PrincipalTensor {
    pub fn new(values_zyx: [f64; 3], angles: EulerAngles) -> Self {
        Self {
            values: values_zyx,
            angles,
        }
    }

    pub fn isotropic(value: f64) -> Self {
        Self::new([value; 3], EulerAngles::zero())
    }

    pub fn zero() -> Self {
        Self::isotropic(0.0)
    }

    pub fn vz(&self) -> f64 {
        self.values[0]
    }
    pub fn vy(&self) -> f64 {
        self.values[1]
    }
    pub fn vx(&self) -> f64 {
        self.values[2]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite()) && self.angles.is_finite()
    }

    pub fn trace(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Laboratory-frame matrix without input validation.
    pub fn lab_matrix(&self) -> Matrix3 {
        let r = self.angles.rotation();
        let d = Matrix3::from_diagonal(&Vector3::new(self.vx(), self.vy(), self.vz()));
        r.transpose() * d * r
    }

    /// Principal z axis in laboratory coordinates (third row of `R`).
    pub fn z_axis(&self) -> Vector3 {
        self.angles.rotation().row(2).transpose()
    }

    pub fn x_axis(&self) -> Vector3 {
        self.angles.rotation().row(0).transpose()
    }

    pub fn y_axis(&self) -> Vector3 {
        self.angles.rotation().row(1).transpose()
    }

    /// Partial derivatives of the lab matrix, ordered `vz, vy, vx, α, β, γ`
    /// (angles per degree).
    pub fn lab_matrix_jacobian(&self) -> [Matrix3; 6] {
        let r = self.angles.rotation();
        let d = Matrix3::from_diagonal(&Vector3::new(self.vx(), self.vy(), self.vz()));
        let outer = |k: usize| {
            let row = r.row(k).transpose();
            row * row.transpose()
        };
        let [da, db, dg] = self.angles.rotation_derivatives();
        let sym = |dr: Matrix3| {
            let half = dr.transpose() * d * r;
            half + half.transpose()
        };
        [outer(2), outer(1), outer(0), sym(da), sym(db), sym(dg)]
    }

    /// Same lab matrix, canonical angle gauge and value ordering.
    pub fn canonical(&self) -> Result<Self> {
        lab_to_principal(&rotate_to_lab(self)?)
    }
}

/// `M = Rᵀ · diag(vx, vy, vz) · R`.
pub fn rotate_to_lab(tensor: &PrincipalTensor) -> Result<Matrix3> {
    if !tensor.is_finite() {
        return Err(invalid(format!("non-finite tensor {tensor:?}")));
    }
    Ok(tensor.lab_matrix())
}

/// Inverse of [`rotate_to_lab`] for a symmetric matrix.
///
/// Principal values are ordered by decreasing magnitude (signs kept). The
/// gauge is β ∈ [0°, 90°], α ∈ (−180°, 180°], γ ∈ (−90°, 90°], with γ = 0
/// when `vy = vx` and α absorbing the whole in-plane angle when β = 0.
pub fn lab_to_principal(m: &Matrix3) -> Result<PrincipalTensor> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite matrix"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(invalid("matrix is not symmetric"));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| {
        let (a, b) = (eig.eigenvalues[i], eig.eigenvalues[j]);
        b.abs()
            .partial_cmp(&a.abs())
            .unwrap()
            .then(b.partial_cmp(&a).unwrap())
    });
    let vz = eig.eigenvalues[order[0]];
    let vy = eig.eigenvalues[order[1]];
    let vx = eig.eigenvalues[order[2]];
    let mut ez: Vector3 = eig.eigenvectors.column(order[0]).into();
    let ey: Vector3 = eig.eigenvectors.column(order[1]).into();
    let mut ex: Vector3 = eig.eigenvectors.column(order[2]).into();

    if ez.z < 0.0 {
        ez = -ez;
    }
    if ex.cross(&ey).dot(&ez) < 0.0 {
        ex = -ex;
    }

    let vmax = vz.abs().max(1e-300);
    let xy_degenerate = (vy - vx).abs() <= 1e-9 * vmax;
    let beta = ez.z.clamp(-1.0, 1.0).acos().to_degrees();
    let sin_beta = (ez.x * ez.x + ez.y * ez.y).sqrt();

    let (alpha, gamma) = if sin_beta < 1e-12 {
        if xy_degenerate {
            (0.0, 0.0)
        } else {
            // R = R_z(α + γ); keep the whole angle in α
            let a = ex.y.atan2(ex.x).to_degrees();
            (fold_half_turn(a), 0.0)
        }
    } else {
        let a = ez.y.atan2(ez.x).to_degrees();
        let g = if xy_degenerate {
            0.0
        } else {
            fold_half_turn(ey.z.atan2(-ex.z).to_degrees())
        };
        (a, g)
    };

    Ok(PrincipalTensor::new(
        [vz, vy, vx],
        EulerAngles::new(alpha, beta, gamma),
    ))
}

/// Maps an angle to (−90°, 90°] using the 180° in-plane symmetry.
fn fold_half_turn(a: f64) -> f64 {
    let w = wrap_degrees(a);
    if w > 90.0 {
        w - 180.0
    } else if w <= -90.0 {
        w + 180.0
    } else {
        w
    }
}

/// Magnetic field in the laboratory frame, tesla.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct FieldVector(Vector3);

impl FieldVector {
    pub fn new(bx: f64, by: f64, bz: f64) -> Result<Self> {
        Self::from_vector(Vector3::new(bx, by, bz))
    }

    pub fn from_vector(v: Vector3) -> Result<Self> {
        if v.iter().all(|c| c.is_finite()) {
            Ok(Self(v))
        } else {
            Err(invalid(format!("non-finite field {v:?}")))
        }
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    /// `magnitude · direction / |direction|`.
    pub fn along(direction: &Vector3, magnitude: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) {
            return Err(invalid("zero field direction"));
        }
        Self::from_vector(direction * (magnitude / n))
    }

    pub fn vector(&self) -> Vector3 {
        self.0
    }

    pub fn magnitude(&self) -> f64 {
        self.0.norm()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }
}

impl std::ops::Neg for FieldVector {
    type Output = Self;
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

impl TryFrom<[f64; 3]> for FieldVector {
    type Error = String;
    fn try_from(v: [f64; 3]) -> std::result::Result<Self, String> {
        Self::new(v[0], v[1], v[2]).map_err(|e| e.to_string())
    }
}

impl From<FieldVector> for [f64; 3] {
    fn from(b: FieldVector) -> Self {
        b.as_array()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn frobenius(m: &Matrix3) -> f64 {
        m.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_rotation_gives_diagonal() {
        let t = PrincipalTensor::new([3.0, 2.0, 1.0], EulerAngles::zero());
        let m = rotate_to_lab(&t).unwrap();
        assert_abs_diff_eq!(m, Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_swaps_transverse_entries() {
        let t = PrincipalTensor::new([3.0, 2.0, 1.0], EulerAngles::new(90.0, 0.0, 0.0));
        let m = rotate_to_lab(&t).unwrap();
        assert_abs_diff_eq!(m, Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 3.0)), epsilon = 1e-14);
    }

    #[test]
    fn hand_expanded_composition_order() {
        // α = 30°, β = 50°, γ = 70°; rows of the z–y′–z″ passive matrix
        let (a, b, g) = (30f64.to_radians(), 50f64.to_radians(), 70f64.to_radians());
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sg, cg) = g.sin_cos();
        let expected = Matrix3::new(
            cg * cb * ca - sg * sa,
            cg * cb * sa + sg * ca,
            -cg * sb,
            -sg * cb * ca - cg * sa,
            -sg * cb * sa + cg * ca,
            sg * sb,
            sb * ca,
            sb * sa,
            cb,
        );
        let r = EulerAngles::new(30.0, 50.0, 70.0).rotation();
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);
        // swapping the roles of α and γ must change the matrix
        let swapped = EulerAngles::new(70.0, 50.0, 30.0).rotation();
        assert!((r - swapped).amax() > 0.1);
    }

    #[test]
    fn z1_g_trace() {
        let t = PrincipalTensor::new(
            [14.846, 2.38, 0.55],
            EulerAngles::new(137.50, -66.036, -155.7),
        );
        let m = rotate_to_lab(&t).unwrap();
        assert_abs_diff_eq!(m.trace(), 17.776, epsilon = 1e-12);
    }

    #[test]
    fn normalization_range() {
        let e = EulerAngles::new(540.0, -180.0, 181.0);
        assert_eq!(e.alpha, 180.0);
        assert_eq!(e.beta, 180.0);
        assert_abs_diff_eq!(e.gamma, -179.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let t = PrincipalTensor::new([f64::NAN, 1.0, 1.0], EulerAngles::zero());
        assert!(rotate_to_lab(&t).is_err());
        let t = PrincipalTensor::new([1.0, 1.0, 1.0], EulerAngles::new(f64::INFINITY, 0.0, 0.0));
        assert!(rotate_to_lab(&t).is_err());
        assert!(FieldVector::new(0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn asymmetric_rejected() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-3;
        assert!(lab_to_principal(&m).is_err());
    }

    #[test]
    fn diagonal_inverse() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0));
        let t = lab_to_principal(&m).unwrap();
        assert_abs_diff_eq!(t.values[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(t.values[1], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(t.values[2], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rotate_to_lab(&t).unwrap(), m, epsilon = 1e-12);
        assert!(t.angles.beta >= 0.0 && t.angles.beta <= 90.0);
    }

    #[test]
    fn degenerate_transverse_values_fix_gamma() {
        let t = PrincipalTensor::new([5.0, 1.0, 1.0], EulerAngles::new(40.0, 30.0, 77.0));
        let back = lab_to_principal(&t.lab_matrix()).unwrap();
        assert_eq!(back.angles.gamma, 0.0);
        assert_abs_diff_eq!(back.lab_matrix(), t.lab_matrix(), epsilon = 1e-12);
    }

    #[test]
    fn beta_zero_gimbal_lock() {
        let t = PrincipalTensor::new([5.0, 2.0, 1.0], EulerAngles::new(20.0, 0.0, 15.0));
        let back = lab_to_principal(&t.lab_matrix()).unwrap();
        assert_abs_diff_eq!(back.lab_matrix(), t.lab_matrix(), epsilon = 1e-12);
        assert_eq!(back.angles.gamma, 0.0);
    }

    #[test]
    fn negative_values_kept_and_sorted_by_magnitude() {
        let t = PrincipalTensor::new([-0.3, 4.0, 1.5], EulerAngles::new(10.0, 20.0, 30.0));
        let back = lab_to_principal(&t.lab_matrix()).unwrap();
        assert_abs_diff_eq!(back.values[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back.values[1], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(back.values[2], -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(back.lab_matrix(), t.lab_matrix(), epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let t = PrincipalTensor::new([3.1, 1.2, 0.4], EulerAngles::new(37.0, -61.0, 112.0));
        let jac = t.lab_matrix_jacobian();
        let h = 1e-6;
        for k in 0..6 {
            let shift = |s: f64| {
                let mut v = t.values;
                let mut a = [t.angles.alpha, t.angles.beta, t.angles.gamma];
                if k < 3 {
                    v[k] += s;
                } else {
                    a[k - 3] += s;
                }
                PrincipalTensor::new(v, EulerAngles::raw(a[0], a[1], a[2])).lab_matrix()
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            assert_abs_diff_eq!(jac[k], fd, epsilon = 1e-8);
        }
    }

    /// Roots of the characteristic polynomial of a symmetric 3×3 matrix by
    /// the trigonometric cubic formula (independent of any eigen-solver).
    fn characteristic_roots(m: &Matrix3) -> [f64; 3] {
        let c2 = -m.trace();
        let c1 = m[(0, 0)] * m[(1, 1)] + m[(1, 1)] * m[(2, 2)] + m[(0, 0)] * m[(2, 2)]
            - m[(0, 1)] * m[(1, 0)]
            - m[(1, 2)] * m[(2, 1)]
            - m[(0, 2)] * m[(2, 0)];
        let c0 = -m.determinant();
        // x³ + c2 x² + c1 x + c0 = 0, shift x = t − c2/3
        let p = c1 - c2 * c2 / 3.0;
        let q = 2.0 * c2.powi(3) / 27.0 - c2 * c1 / 3.0 + c0;
        let r = (-p / 3.0).max(0.0).sqrt();
        let arg = if r > 0.0 { (-q / (2.0 * r.powi(3))).clamp(-1.0, 1.0) } else { 0.0 };
        let phi = arg.acos() / 3.0;
        let mut roots = [0.0; 3];
        for (k, root) in roots.iter_mut().enumerate() {
            *root = 2.0 * r * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() - c2 / 3.0;
        }
        roots.sort_by(|a, b| b.partial_cmp(a).unwrap());
        roots
    }

    #[test]
    fn random_symmetric_matches_characteristic_roots() {
        let m = Matrix3::new(2.0, 0.7, -0.3, 0.7, -1.1, 0.45, -0.3, 0.45, 0.6);
        let t = lab_to_principal(&m).unwrap();
        let mut got = t.values;
        got.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let want = characteristic_roots(&m);
        for k in 0..3 {
            assert_abs_diff_eq!(got[k], want[k], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(rotate_to_lab(&t).unwrap(), m, epsilon = 1e-9);
    }

    fn angle() -> impl Strategy<Value = f64> {
        -360.0..360.0f64
    }

    proptest! {
        #[test]
        fn lab_matrix_invariants(
            v in prop::array::uniform3(-20.0..20.0f64),
            a in angle(), b in angle(), g in angle(),
        ) {
            let t = PrincipalTensor::new(v, EulerAngles::new(a, b, g));
            let m = rotate_to_lab(&t).unwrap();
            let r = t.angles.rotation();
            prop_assert!((r * r.transpose() - Matrix3::identity()).amax() < 1e-12);
            prop_assert!((m - m.transpose()).amax() < 1e-12);
            prop_assert!((m.trace() - t.trace()).abs() < 1e-12 * (1.0 + t.trace().abs()).max(20.0));
            let fro_d = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((frobenius(&m) - fro_d).abs() < 1e-12 * fro_d.max(1.0) * 10.0);
            let mut eig: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
            eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let mut want = v.to_vec();
            want.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for k in 0..3 {
                prop_assert!((eig[k] - want[k]).abs() < 1e-10 * 20.0);
            }
        }

        #[test]
        fn gauge_partner_same_matrix(a in angle(), b in angle(), g in angle()) {
            let e = EulerAngles::new(a, b, g);
            let t1 = PrincipalTensor::new([3.0, 1.0, 0.2], e);
            let t2 = PrincipalTensor::new([3.0, 1.0, 0.2], e.gauge_partner());
            prop_assert!((t1.lab_matrix() - t2.lab_matrix()).amax() < 1e-12);
        }

        #[test]
        fn principal_roundtrip(
            v in prop::array::uniform3(0.05..20.0f64),
            a in angle(), b in angle(), g in angle(),
        ) {
            let t = PrincipalTensor::new(v, EulerAngles::new(a, b, g));
            let m = t.lab_matrix();
            let back = lab_to_principal(&m).unwrap();
            prop_assert!((rotate_to_lab(&back).unwrap() - m).amax() < 1e-9);
            let mut want = v;
            want.sort_by(|x, y| y.abs().partial_cmp(&x.abs()).unwrap());
            for k in 0..3 {
                prop_assert!((back.values[k] - want[k]).abs() < 1e-10 * 20.0);
            }
            prop_assert!(back.angles.beta >= 0.0 && back.angles.beta <= 90.0);
            prop_assert!(back.angles.gamma > -90.0 - 1e-9 && back.angles.gamma <= 90.0 + 1e-9);
        }
    }
}
