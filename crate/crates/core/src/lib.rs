//! Kernel two-sample distances and generative-model evaluation metrics.
//!
//! The crate is organised bottom-up:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`num`] | feature matrices, symmetric eigendecomposition, PSD square roots, special functions, seeded RNG streams |
//! | [`kernels`] | RBF / rational-quadratic mixtures, linear, distance-induced and polynomial kernels with analytic gradients |
//! | [`estimators`] | unbiased and biased squared MMD, block averaging, KID, energy distance, Cramér surrogate, witness functions |
//! | [`scores`] | Gaussian moment fitting, Fréchet distance (FID), its 1-D expectation, censored-normal moments, Inception score |
//! | [`relative`] | three-sample relative similarity test and the learning-rate adaptation controller |
//! | [`bias_lab`] | Monte-Carlo demonstrations of estimator bias (data splitting, FID ordering reversal, KID/FID curves) |
//! | [`gradnet`] | small affine/ReLU networks, reverse-mode MMD loss gradients, finite-difference and unbiasedness checks |
//!
//! Every randomized entry point takes an explicit [`RngState`]; identical
//! seeds give bit-identical results regardless of the rayon thread count.

pub mod bias_lab;
pub mod error;
pub mod estimators;
pub mod gradnet;
pub mod kernels;
pub mod num;
pub mod relative;
pub mod scores;

pub use error::{Error, Result};
pub use estimators::Estimate;
pub use kernels::KernelSpec;
pub use num::{FeatureMatrix, RngState, SymMatrix};
