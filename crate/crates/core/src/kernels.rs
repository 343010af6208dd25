//! Kernel families, pairwise kernel matrices and analytic gradients.
//!
//! Mixtures are plain sums over their parameter lists, so a mixture of `k`
//! RBF components takes values in `(0, k]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{dot, squared_distance, FeatureMatrix};

/// Bandwidths used when an RBF mixture is requested without parameters.
pub const DEFAULT_SIGMAS: [f64; 6] = [2.0, 5.0, 10.0, 20.0, 40.0, 80.0];
/// Shape parameters used when a rational-quadratic mixture is requested
/// without parameters.
pub const DEFAULT_ALPHAS: [f64; 5] = [0.2, 0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelSpec {
    /// `sum_sigma exp(-||x - y||^2 / (2 sigma^2))`
    RbfMixture { sigmas: Vec<f64> },
    /// `sum_alpha (1 + ||x - y||^2 / (2 alpha))^(-alpha)`
    RqMixture { alphas: Vec<f64> },
    /// `<x, y>`
    Dot,
    /// rational-quadratic mixture plus the linear kernel
    RqDot { alphas: Vec<f64> },
    /// `(||x - z0||^b + ||y - z0||^b - ||x - y||^b) / 2`
    Distance { beta: f64, z0: Vec<f64> },
    /// `(gamma <x, y> + coef)^degree`
    Poly { degree: u32, gamma: f64, coef: f64 },
}

impl KernelSpec {
    pub fn rbf(sigmas: &[f64]) -> Result<Self> {
        let s = Self::RbfMixture {
            sigmas: sigmas.to_vec(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn rq(alphas: &[f64]) -> Result<Self> {
        let s = Self::RqMixture {
            alphas: alphas.to_vec(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn rq_dot(alphas: &[f64]) -> Result<Self> {
        let s = Self::RqDot {
            alphas: alphas.to_vec(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Distance-induced kernel with `z0` at the origin of `R^dim`.
    pub fn distance(beta: f64, dim: usize) -> Result<Self> {
        Self::distance_at(beta, vec![0.0; dim])
    }

    pub fn distance_at(beta: f64, z0: Vec<f64>) -> Result<Self> {
        let s = Self::Distance { beta, z0 };
        s.validate()?;
        Ok(s)
    }

    pub fn poly(degree: u32, gamma: f64, coef: f64) -> Result<Self> {
        let s = Self::Poly {
            degree,
            gamma,
            coef,
        };
        s.validate()?;
        Ok(s)
    }

    /// The cubic kernel `(<x, y> / dim + 1)^3` used by KID.
    pub fn kid(dim: usize) -> Self {
        Self::Poly {
            degree: 3,
            gamma: 1.0 / dim as f64,
            coef: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive_list(name: &str, v: &[f64]) -> Result<()> {
            if v.is_empty() {
                return Err(Error::InvalidInput(format!("{name} list is empty")));
            }
            if let Some(bad) = v.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {bad}")));
            }
            Ok(())
        }
        match self {
            Self::RbfMixture { sigmas } => positive_list("sigma", sigmas),
            Self::RqMixture { alphas } | Self::RqDot { alphas } => positive_list("alpha", alphas),
            Self::Dot => Ok(()),
            Self::Distance { beta, z0 } => {
                if !(*beta > 0.0 && *beta <= 2.0) {
                    return Err(Error::InvalidInput(format!("beta must lie in (0, 2], got {beta}")));
                }
                if z0.is_empty() || z0.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("z0 must be a finite non-empty vector".into()));
                }
                Ok(())
            }
            Self::Poly { degree, gamma, coef } => {
                if *degree == 0 {
                    return Err(Error::InvalidInput("polynomial degree must be positive".into()));
                }
                if !(gamma.is_finite() && *gamma > 0.0) || !coef.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "polynomial needs gamma > 0 and finite coef, got {gamma}, {coef}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// The only kernel family tied to a particular input dimension.
    pub fn required_dim(&self) -> Option<usize> {
        match self {
            Self::Distance { z0, .. } => Some(z0.len()),
            _ => None,
        }
    }

    /// `rho_beta(x, z0)` is well defined for every family, but `beta < 1`
    /// only yields a semimetric.
    pub fn is_semimetric_only(&self) -> bool {
        matches!(self, Self::Distance { beta, .. } if *beta < 1.0)
    }

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        if let Some(d) = self.required_dim() {
            if d != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: x.len(),
                });
            }
        }
        Ok(())
    }

    fn check_matrix_dim(&self, cols: usize) -> Result<()> {
        match self.required_dim() {
            Some(d) if d != cols => Err(Error::DimensionMismatch {
                expected: d,
                found: cols,
            }),
            _ => Ok(()),
        }
    }

    /// Kernel value without dimension checks.
    #[inline]
    pub(crate) fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Self::RbfMixture { sigmas } => {
                let r = squared_distance(x, y);
                sigmas.iter().map(|s| (-r / (2.0 * s * s)).exp()).sum()
            }
            Self::RqMixture { alphas } => rq_sum(alphas, squared_distance(x, y)),
            Self::Dot => dot(x, y),
            Self::RqDot { alphas } => rq_sum(alphas, squared_distance(x, y)) + dot(x, y),
            Self::Distance { beta, z0 } => {
                0.5 * (rho(x, z0, *beta) + rho(y, z0, *beta) - rho(x, y, *beta))
            }
            Self::Poly { degree, gamma, coef } => {
                (gamma * dot(x, y) + coef).powi(*degree as i32)
            }
        }
    }
}

/// `||a - b||^beta`.
#[inline]
pub fn rho(a: &[f64], b: &[f64], beta: f64) -> f64 {
    let r = squared_distance(a, b);
    if beta == 2.0 {
        r
    } else if beta == 1.0 {
        r.sqrt()
    } else {
        r.powf(0.5 * beta)
    }
}

#[inline]
fn rq_component(alpha: f64, r: f64) -> f64 {
    let u = 1.0 + r / (2.0 * alpha);
    if alpha == 1.0 {
        1.0 / u
    } else if alpha.fract() == 0.0 && alpha <= 64.0 {
        u.powi(-(alpha as i32))
    } else if alpha == 0.5 {
        1.0 / u.sqrt()
    } else {
        u.powf(-alpha)
    }
}

#[inline]
fn rq_sum(alphas: &[f64], r: f64) -> f64 {
    alphas.iter().map(|&a| rq_component(a, r)).sum()
}

/// `k(x, y)` for the given spec.
pub fn kernel_value(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.check_dims(x, y)?;
    Ok(spec.eval(x, y))
}

/// Dense `m x n` matrix of kernel values.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl KernelMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Entry `(i, j)` is `k(x_i, y_j)`. Rows are filled in parallel; each entry
/// is computed independently so the result does not depend on the thread
/// count.
pub fn kernel_matrix(spec: &KernelSpec, x: &FeatureMatrix, y: &FeatureMatrix) -> Result<KernelMatrix> {
    x.ensure_same_cols(y)?;
    spec.check_matrix_dim(x.cols())?;
    let (m, n) = (x.rows(), y.rows());
    let mut values = vec![0.0; m * n];
    values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out)| {
            let xi = x.row(i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = spec.eval(xi, y.row(j));
            }
        });
    Ok(KernelMatrix {
        rows: m,
        cols: n,
        values,
    })
}

/// Gram matrix of `x` against itself; the upper triangle is evaluated and
/// mirrored so the result is exactly symmetric.
pub fn gram_matrix(spec: &KernelSpec, x: &FeatureMatrix) -> Result<KernelMatrix> {
    spec.check_matrix_dim(x.cols())?;
    let n = x.rows();
    let mut values = vec![0.0; n * n];
    values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out)| {
            let xi = x.row(i);
            for (j, o) in out.iter_mut().enumerate().skip(i) {
                *o = spec.eval(xi, x.row(j));
            }
        });
    for i in 0..n {
        for j in 0..i {
            values[i * n + j] = values[j * n + i];
        }
    }
    Ok(KernelMatrix {
        rows: n,
        cols: n,
        values,
    })
}

/// Gradients of `k(x, y)` with respect to `x` and to `y`.
pub fn kernel_grad(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.check_dims(x, y)?;
    let d = x.len();
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    accumulate_grad(spec, x, y, 1.0, &mut gx, &mut gy)?;
    Ok((gx, gy))
}

/// Adds `w * grad_x k(x, y)` into `gx` and `w * grad_y k(x, y)` into `gy`.
pub(crate) fn accumulate_grad(
    spec: &KernelSpec,
    x: &[f64],
    y: &[f64],
    w: f64,
    gx: &mut [f64],
    gy: &mut [f64],
) -> Result<()> {
    // Stationary kernels: grad_x = c (x - y), grad_y = -grad_x.
    let stationary = |c: f64, gx: &mut [f64], gy: &mut [f64]| {
        for ((a, b), (ox, oy)) in x.iter().zip(y).zip(gx.iter_mut().zip(gy.iter_mut())) {
            let g = w * c * (a - b);
            *ox += g;
            *oy -= g;
        }
    };
    match spec {
        KernelSpec::RbfMixture { sigmas } => {
            let r = squared_distance(x, y);
            let c: f64 = sigmas
                .iter()
                .map(|s| -(-r / (2.0 * s * s)).exp() / (s * s))
                .sum();
            stationary(c, gx, gy);
        }
        KernelSpec::RqMixture { alphas } => {
            let c = rq_grad_coef(alphas, squared_distance(x, y));
            stationary(c, gx, gy);
        }
        KernelSpec::Dot => {
            for i in 0..x.len() {
                gx[i] += w * y[i];
                gy[i] += w * x[i];
            }
        }
        KernelSpec::RqDot { alphas } => {
            let c = rq_grad_coef(alphas, squared_distance(x, y));
            stationary(c, gx, gy);
            for i in 0..x.len() {
                gx[i] += w * y[i];
                gy[i] += w * x[i];
            }
        }
        KernelSpec::Distance { beta, z0 } => {
            let beta = *beta;
            // d/da ||a - b||^beta = beta ||a - b||^(beta - 2) (a - b)
            let coef = |a: &[f64], b: &[f64], what: &str| -> Result<f64> {
                let r = squared_distance(a, b);
                if r == 0.0 {
                    if beta < 2.0 {
                        return Err(Error::NonDifferentiable(format!(
                            "distance kernel with beta = {beta} at coincident {what}"
                        )));
                    }
                    return Ok(beta);
                }
                Ok(beta * r.powf(0.5 * beta - 1.0))
            };
            let cxz = coef(x, z0, "x and z0")?;
            let cyz = coef(y, z0, "y and z0")?;
            let cxy = coef(x, y, "x and y")?;
            for i in 0..x.len() {
                let dxy = cxy * (x[i] - y[i]);
                gx[i] += w * 0.5 * (cxz * (x[i] - z0[i]) - dxy);
                gy[i] += w * 0.5 * (cyz * (y[i] - z0[i]) + dxy);
            }
        }
        KernelSpec::Poly { degree, gamma, coef } => {
            let p = *degree as i32;
            let base = gamma * dot(x, y) + coef;
            let c = w * f64::from(p) * gamma * base.powi(p - 1);
            for i in 0..x.len() {
                gx[i] += c * y[i];
                gy[i] += c * x[i];
            }
        }
    }
    Ok(())
}

/// Sum over components of `d k_alpha / d x` divided by `(x - y)`.
fn rq_grad_coef(alphas: &[f64], r: f64) -> f64 {
    alphas
        .iter()
        .map(|&a| {
            let u = 1.0 + r / (2.0 * a);
            -rq_component(a, r) / u
        })
        .sum()
}
