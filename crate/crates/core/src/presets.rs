//! Reference parameter sets.
//!
//! The C1 site of a single 167Er3+ ion in silicon: lowest ground-multiplet
//! level Z1 and one excited-multiplet level Yi. Hyperfine values in GHz.

use crate::hamiltonian::LevelParams;
use crate::tensor::{EulerAngles, PrincipalTensor};
use crate::transitions::SystemParams;

/// Zero-field optical transition frequency of the site, GHz.
pub const ER_SI_F0_GHZ: f64 = 195036.7;

pub fn er_si_z1() -> LevelParams {
    LevelParams::new(
        PrincipalTensor::new([14.846, 2.38, 0.55], EulerAngles::new(137.50, -66.036, -155.7)),
        PrincipalTensor::new([1.558, 0.56, 0.30], EulerAngles::new(138.77, -66.30, -65.0)),
    )
}

pub fn er_si_yi() -> LevelParams {
    LevelParams::new(
        PrincipalTensor::new([13.100, 0.59, 0.16], EulerAngles::new(129.74, -71.87, -161.0)),
        PrincipalTensor::new([1.773, 0.42, 0.07], EulerAngles::new(127.39, -72.2, -101.0)),
    )
}

pub fn er_si_system() -> SystemParams {
    SystemParams {
        z1: er_si_z1(),
        yi: er_si_yi(),
        f0: ER_SI_F0_GHZ,
    }
}
