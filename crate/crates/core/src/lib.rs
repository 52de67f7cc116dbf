//! Forward model, fitting and ZEFOZ analysis for the effective spin
//! Hamiltonian of a single 167Er3+ ion (S = 1/2, I = 7/2).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fitter;
pub mod hamiltonian;
pub mod io;
pub mod optim;
pub mod peaks;
pub mod presets;
pub mod tensor;
pub mod transitions;
pub mod uncertainty;
pub mod zefoz;

pub use error::{Error, Result};
pub use hamiltonian::{LevelParams, LevelSpectrum, PhysicalConstants};
pub use tensor::{EulerAngles, FieldVector, Matrix3, PrincipalTensor, Vector3};
pub use transitions::{Group, SpectrumTrace, SystemParams, TransitionPeak};
pub use zefoz::{CoherenceEstimate, Regime, ZefozPoint, ZefozSearch};
