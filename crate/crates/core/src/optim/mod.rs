//! Local and global minimizers used by the peak extractor and the fitter.

pub mod basin_hopping;
pub mod levenberg_marquardt;
pub mod nelder_mead;

pub use basin_hopping::{basin_hopping, BasinHoppingOptions, BasinHoppingResult};
pub use levenberg_marquardt::{levenberg_marquardt, LeastSquares, LmOptions};
pub use nelder_mead::{nelder_mead, NelderMeadOptions};

/// Inclusive per-coordinate box.
pub type Bounds = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn clamp_to(x: &[f64], bounds: Option<&Bounds>) -> Vec<f64> {
    match bounds {
        None => x.to_vec(),
        Some(b) => x.iter().zip(b).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect(),
    }
}
