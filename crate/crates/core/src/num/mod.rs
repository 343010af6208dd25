//! Numerical substrate: matrices, symmetric eigendecomposition, special
//! functions and seeded random streams.

mod eig;
mod matrix;
mod rng;
mod special;

pub use eig::{psd_sqrt, psd_tolerance, sym_eig, SymEigen, MAX_SWEEPS};
pub use matrix::{dot, matmul, squared_distance, transpose, FeatureMatrix, SymMatrix};
pub use rng::{rng_gaussian, RngState};
pub use special::{log_gamma, std_normal_cdf, std_normal_pdf};

/// Mean, sample standard deviation (divisor `n - 1`) and standard error of
/// `values`. The latter two are zero for fewer than two values.
pub fn mean_std_stderr(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    (mean, std, std / (n as f64).sqrt())
}
