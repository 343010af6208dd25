//! Fréchet distance between fitted Gaussians (FID), its exact expectation
//! for one-dimensional normals, moments of censored normals and the
//! Inception score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{
    log_gamma, psd_sqrt, psd_tolerance, std_normal_cdf, std_normal_pdf, sym_eig, FeatureMatrix,
    RngState, SymMatrix,
};

/// Monte-Carlo draws per parallel block in [`censored_normal_moments`].
const MC_BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                expected: cov.dim(),
                found: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("mean has non-finite entries".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (divisor `n - 1`) covariance.
pub fn fit_moments(x: &FeatureMatrix) -> Result<GaussianMoments> {
    x.ensure_rows(2)?;
    let (n, d) = (x.rows(), x.cols());
    let mean = x.column_means();
    // centred data, column-major so each covariance entry is a contiguous dot
    let mut centred = vec![0.0; n * d];
    for (i, row) in x.iter_rows().enumerate() {
        for c in 0..d {
            centred[c * n + i] = row[c] - mean[c];
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    let upper: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|i| {
            let ci = &centred[i * n..(i + 1) * n];
            (i..d)
                .map(|j| {
                    let cj = &centred[j * n..(j + 1) * n];
                    ci.iter().zip(cj).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect()
        })
        .collect();
    let cov = SymMatrix::from_upper_fn(d, |i, j| upper[i][j - i]);
    GaussianMoments::new(mean, cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetDistance {
    pub value: f64,
    /// A slightly negative round-off result was reported as zero.
    pub clamped: bool,
}

/// `||mu_a - mu_b||^2 + tr S_a + tr S_b - 2 tr (S_a S_b)^(1/2)`.
///
/// The trace term is evaluated as `tr (A S_b A)^(1/2)` with `A = S_a^(1/2)`,
/// which has the same eigenvalues as `S_a S_b` but is symmetric.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<FrechetDistance> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let sa = psd_sqrt(&a.cov)?;
    ensure_psd(&b.cov)?;
    let inner = sa.sandwich(&b.cov);
    let eig = sym_eig(&inner)?;
    let cross: f64 = eig.values.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(p, q)| (p - q).powi(2)).sum();
    let traces = a.cov.trace() + b.cov.trace();
    let value = mean_term + traces - 2.0 * cross;
    if value >= 0.0 {
        return Ok(FrechetDistance {
            value,
            clamped: false,
        });
    }
    if value >= -1e-8 * traces.max(1.0) {
        return Ok(FrechetDistance {
            value: 0.0,
            clamped: true,
        });
    }
    Err(Error::Numerical(format!("Fréchet distance evaluated to {value}")))
}

fn ensure_psd(s: &SymMatrix) -> Result<()> {
    let eig = sym_eig(s)?;
    let tol = psd_tolerance(s);
    match eig.values.last() {
        Some(&min) if min < -tol => Err(Error::NotPsd {
            eigenvalue: min,
            tolerance: tol,
        }),
        _ => Ok(()),
    }
}

/// Plug-in FID between two samples.
pub fn fid_estimate(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<FrechetDistance> {
    x.ensure_same_cols(y)?;
    frechet_distance(&fit_moments(x)?, &fit_moments(y)?)
}

/// `E[s] / sigma` for the sample standard deviation `s` of `m` normal draws:
/// `sqrt(2) Gamma(m/2) / (sqrt(m - 1) Gamma((m - 1)/2))`.
pub fn d_m_coefficient(m: u64) -> Result<f64> {
    if m < 2 {
        return Err(Error::Domain(format!("d_m needs m >= 2, got {m}")));
    }
    if m > 1000 {
        // Gamma(x + 1/2) / (sqrt(x) Gamma(x)) with x = (m - 1)/2; the
        // log-gamma difference would lose ~m * eps here.
        let x = (m - 1) as f64 / 2.0;
        let u = 1.0 / x;
        return Ok(1.0 + u * (-1.0 / 8.0 + u * (1.0 / 128.0 + u * (5.0 / 1024.0 - u * 21.0 / 32768.0))));
    }
    let mf = m as f64;
    let log = 0.5 * 2f64.ln() + log_gamma(mf / 2.0)? - 0.5 * (mf - 1.0).ln() - log_gamma((mf - 1.0) / 2.0)?;
    Ok(log.exp())
}

/// Sample size for one side of an FID comparison; `Infinite` stands for
/// the exact population moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleCount {
    Finite(u64),
    Infinite,
}

impl SampleCount {
    fn factors(self) -> Result<(f64, f64)> {
        match self {
            Self::Infinite => Ok((1.0, 1.0)),
            Self::Finite(m) => Ok(((m as f64 + 1.0) / m as f64, d_m_coefficient(m)?)),
        }
    }
}

/// Expected plug-in FID between samples of size `m` from `N(mu_p, sigma_p^2)`
/// and `n` from `N(mu_q, sigma_q^2)`.
pub fn expected_fid_1d_normal(
    mu_p: f64,
    sigma_p: f64,
    mu_q: f64,
    sigma_q: f64,
    m: SampleCount,
    n: SampleCount,
) -> Result<f64> {
    if !(sigma_p > 0.0 && sigma_q > 0.0) || !sigma_p.is_finite() || !sigma_q.is_finite() {
        return Err(Error::Domain(format!(
            "standard deviations must be positive, got {sigma_p} and {sigma_q}"
        )));
    }
    let (fm, dm) = m.factors()?;
    let (fn_, dn) = n.factors()?;
    Ok((mu_p - mu_q).powi(2) + fm * sigma_p * sigma_p + fn_ * sigma_q * sigma_q
        - 2.0 * dm * dn * sigma_p * sigma_q)
}

/// Mean and variance of `relu(N(mu, sigma^2))`.
pub fn censored_normal_moments_1d(mu: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::Domain(format!("need finite mu and sigma > 0, got {mu}, {sigma}")));
    }
    let (mean, second) = censored_raw_moments(mu, sigma);
    Ok((mean, (second - mean * mean).max(0.0)))
}

fn censored_raw_moments(mu: f64, sigma: f64) -> (f64, f64) {
    let z = mu / sigma;
    let (cdf, pdf) = (std_normal_cdf(z), std_normal_pdf(z));
    let mean = mu * cdf + sigma * pdf;
    let second = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf;
    (mean, second)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoredMoments {
    pub moments: GaussianMoments,
    /// Monte-Carlo standard errors of the covariance entries; zero on the
    /// diagonal, which is exact.
    pub cov_stderr: SymMatrix,
    pub mc_samples: usize,
}

/// Moments of `relu(N(mu, cov))`.
///
/// Means and variances use the one-dimensional closed forms. Off-diagonal
/// covariances are `E[r_i r_j] - mean_i mean_j` with the expectation
/// estimated from `mc_samples` seeded draws, except for pairs with
/// `cov[i][j] == 0`: those coordinates are independent and their censored
/// covariance is exactly zero.
pub fn censored_normal_moments(
    mu: &[f64],
    cov: &SymMatrix,
    rng: &mut RngState,
    mc_samples: usize,
) -> Result<CensoredMoments> {
    let d = cov.dim();
    if mu.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: mu.len(),
        });
    }
    if mc_samples < 2 {
        return Err(Error::InvalidInput("need at least two Monte-Carlo samples".into()));
    }
    let root = psd_sqrt(cov)?;
    let mut mean = Vec::with_capacity(d);
    let mut second = Vec::with_capacity(d);
    for i in 0..d {
        let var = cov.get(i, i);
        if var > 0.0 {
            let (m1, m2) = censored_raw_moments(mu[i], var.sqrt());
            mean.push(m1);
            second.push(m2);
        } else {
            let r = mu[i].max(0.0);
            mean.push(r);
            second.push(r * r);
        }
    }

    let base = RngState::new(rng.next_u64(), rng.stream());
    let blocks = mc_samples.div_ceil(MC_BLOCK);
    let tri = d * (d + 1) / 2;
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = base.derive(b as u64);
            let count = MC_BLOCK.min(mc_samples - b * MC_BLOCK);
            let mut sum = vec![0.0; tri];
            let mut sumsq = vec![0.0; tri];
            let mut z = vec![0.0; d];
            let mut v = vec![0.0; d];
            for _ in 0..count {
                z.iter_mut().for_each(|e| *e = r.gaussian());
                for i in 0..d {
                    let s: f64 = (0..d).map(|k| root.get(i, k) * z[k]).sum();
                    v[i] = (mu[i] + s).max(0.0);
                }
                let mut t = 0;
                for i in 0..d {
                    for j in i..d {
                        let p = v[i] * v[j];
                        sum[t] += p;
                        sumsq[t] += p * p;
                        t += 1;
                    }
                }
            }
            (sum, sumsq)
        })
        .collect();
    let mut sum = vec![0.0; tri];
    let mut sumsq = vec![0.0; tri];
    for (s, q) in &partial {
        for t in 0..tri {
            sum[t] += s[t];
            sumsq[t] += q[t];
        }
    }

    let n = mc_samples as f64;
    let mut cov_out = SymMatrix::zeros(d);
    let mut se = SymMatrix::zeros(d);
    let mut t = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                cov_out.set(i, i, (second[i] - mean[i] * mean[i]).max(0.0));
            } else if cov.get(i, j) == 0.0 {
                // jointly Gaussian and uncorrelated, hence independent
                cov_out.set(i, j, 0.0);
            } else {
                let m = sum[t] / n;
                let var = ((sumsq[t] - n * m * m) / (n - 1.0)).max(0.0);
                cov_out.set(i, j, m - mean[i] * mean[j]);
                se.set(i, j, (var / n).sqrt());
            }
            t += 1;
        }
    }
    Ok(CensoredMoments {
        moments: GaussianMoments::new(mean, cov_out)?,
        cov_stderr: se,
        mc_samples,
    })
}

/// `exp(mean_x KL(p(y|x) || p(y)))` for rows of class probabilities.
pub fn inception_score(probs: &FeatureMatrix) -> Result<f64> {
    for (i, row) in probs.iter_rows().enumerate() {
        if let Some(v) = row.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidInput(format!("row {i} has negative probability {v}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidInput(format!("row {i} sums to {s}, not 1")));
        }
    }
    let marginal = probs.column_means();
    let kl_sum: f64 = probs
        .iter_rows()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p / q).ln())
                .sum::<f64>()
        })
        .sum();
    Ok((kl_sum / probs.rows() as f64).exp())
}
