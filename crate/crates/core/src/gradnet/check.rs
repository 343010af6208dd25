use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::num::{FeatureMatrix, RngState};

use super::loss::{check_shapes, forward, mmd_loss, mmd_loss_grad};
use super::net::{min_relu_margin, NetSpec};

/// Absolute floor in the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// The denominator is also floored at this fraction of the largest
/// comparison component. Coordinates that vanish identically (an output
/// bias under a translation-invariant kernel) otherwise compare round-off
/// against round-off.
pub const REL_ERR_SCALE_FLOOR: f64 = 1e-3;

/// ReLU pre-activations closer to zero than this multiple of the step are
/// treated as kinks.
pub const KINK_MARGIN_STEPS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub comparison: Vec<f64>,
    pub max_rel_error: f64,
    pub cosine: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic_stderr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison_stderr: Option<Vec<f64>>,
    /// Share of components whose difference lies within three combined
    /// standard errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub within_3se: Option<f64>,
}

impl GradReport {
    fn compare(analytic: Vec<f64>, comparison: Vec<f64>) -> Self {
        let floor = relative_floor(&comparison);
        let max_rel_error = analytic
            .iter()
            .zip(&comparison)
            .map(|(a, c)| (a - c).abs() / a.abs().max(c.abs()).max(floor))
            .fold(0.0, f64::max);
        Self {
            cosine: cosine(&analytic, &comparison),
            max_rel_error,
            analytic,
            comparison,
            analytic_stderr: None,
            comparison_stderr: None,
            within_3se: None,
        }
    }
}

/// Denominator floor used for componentwise relative errors.
pub fn relative_floor(comparison: &[f64]) -> f64 {
    let scale = comparison.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    REL_ERR_FLOOR.max(REL_ERR_SCALE_FLOOR * scale)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn split_params(critic: &NetSpec, generator: Option<&NetSpec>, flat: &[f64]) -> Result<(NetSpec, Option<NetSpec>)> {
    let nc = critic.num_params();
    let c = critic.with_params(&flat[..nc])?;
    let g = generator.map(|g| g.with_params(&flat[nc..])).transpose()?;
    Ok((c, g))
}

/// Central-difference check of [`mmd_loss_grad`] at the given inputs.
///
/// Fails with [`Error::KinkProximity`] when some ReLU pre-activation lies
/// within `10 * eps` of zero, where the difference quotient straddles the
/// kink.
pub fn finite_diff_check(
    critic: &NetSpec,
    generator: Option<&NetSpec>,
    spec: &KernelSpec,
    x: &FeatureMatrix,
    z: &FeatureMatrix,
    eps: f64,
) -> Result<GradReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    check_shapes(critic, generator, x, z)?;
    let fw = forward(critic, generator, x, z);
    let mut margin = min_relu_margin(critic, &fw.crit_x).min(min_relu_margin(critic, &fw.crit_y));
    if let (Some(g), Some(t)) = (generator, fw.gen.as_ref()) {
        margin = margin.min(min_relu_margin(g, t));
    }
    if margin < KINK_MARGIN_STEPS * eps {
        return Err(Error::KinkProximity { margin, retries: 0 });
    }

    let analytic = mmd_loss_grad(critic, generator, spec, x, z)?.grad;
    let mut flat = critic.params();
    if let Some(g) = generator {
        flat.extend(g.params());
    }
    let numeric = (0..flat.len())
        .map(|k| {
            let at = |delta: f64| -> Result<f64> {
                let mut p = flat.clone();
                p[k] += delta;
                let (c, g) = split_params(critic, generator, &p)?;
                mmd_loss(&c, g.as_ref(), spec, x, z)
            };
            Ok((at(eps)? - at(-eps)?) / (2.0 * eps))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(GradReport::compare(analytic, numeric))
}

/// Outcome of [`finite_diff_check_seeded`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededCheck {
    pub report: GradReport,
    /// Input draws rejected for lying too close to a ReLU kink.
    pub resamples: u32,
}

/// Draws `x ~ N(0.5, I)` and `z ~ N(0, I)` with `m` and `n` rows and runs
/// [`finite_diff_check`], redrawing up to `max_retries` times when the
/// inputs land near a kink.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check_seeded(
    critic: &NetSpec,
    generator: Option<&NetSpec>,
    spec: &KernelSpec,
    m: usize,
    n: usize,
    eps: f64,
    max_retries: u32,
    rng: &mut RngState,
) -> Result<SeededCheck> {
    let base = RngState::new(rng.next_u64(), rng.stream());
    let z_dim = generator.map_or(critic.input_dim, |g| g.input_dim);
    let mut last_margin = 0.0;
    for attempt in 0..=max_retries {
        let mut r = base.derive(attempt as u64);
        let x = draw(&mut r, m, critic.input_dim, 0.5, 1.0)?;
        let z = draw(&mut r, n, z_dim, 0.0, 1.0)?;
        match finite_diff_check(critic, generator, spec, &x, &z, eps) {
            Ok(report) => {
                return Ok(SeededCheck {
                    report,
                    resamples: attempt,
                })
            }
            Err(Error::KinkProximity { margin, .. }) => last_margin = margin,
            Err(e) => return Err(e),
        }
    }
    Err(Error::KinkProximity {
        margin: last_margin,
        retries: max_retries as usize,
    })
}

fn draw(rng: &mut RngState, rows: usize, cols: usize, mean: f64, std: f64) -> Result<FeatureMatrix> {
    let v = rng.gaussians(rows * cols).into_iter().map(|g| mean + std * g).collect();
    FeatureMatrix::new(rows, cols, v)
}

/// Isotropic Gaussian `N(mean, std^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSampler {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianSampler {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if mean.is_empty() || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("sampler mean must be non-empty and finite".into()));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Domain(format!("sampler std must be positive, got {std}")));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rows: usize, rng: &mut RngState) -> Result<FeatureMatrix> {
        let d = self.dim();
        let v = rng
            .gaussians(rows * d)
            .into_iter()
            .enumerate()
            .map(|(k, g)| self.mean[k % d] + self.std * g)
            .collect();
        FeatureMatrix::new(rows, d, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessConfig {
    pub data: GaussianSampler,
    pub noise: GaussianSampler,
    pub minibatch: usize,
    pub reps: usize,
    /// Rows per side for the large-sample reference gradient.
    pub proxy_n: usize,
    pub proxy_block: usize,
}

fn grad_stats(grads: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let p = grads[0].len();
    let r = grads.len() as f64;
    let mut mean = vec![0.0; p];
    for g in grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / r;
        }
    }
    let mut var = vec![0.0; p];
    for g in grads {
        for ((s, v), m) in var.iter_mut().zip(g).zip(&mean) {
            *s += (v - m) * (v - m) / (r - 1.0);
        }
    }
    let se = var.into_iter().map(|v| (v / r).sqrt()).collect();
    (mean, se)
}

fn batch_grads(
    critic: &NetSpec,
    generator: Option<&NetSpec>,
    spec: &KernelSpec,
    cfg: &UnbiasednessConfig,
    rows: usize,
    count: usize,
    base: &RngState,
) -> Result<Vec<Vec<f64>>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut r = base.derive(k as u64);
            let x = cfg.data.sample(rows, &mut r)?;
            let z = cfg.noise.sample(rows, &mut r)?;
            Ok(mmd_loss_grad(critic, generator, spec, &x, &z)?.grad)
        })
        .collect()
}

/// Compares the mean of `reps` minibatch gradients against a reference
/// gradient averaged over `proxy_n / proxy_block` independent blocks.
///
/// Both estimates are unbiased for the population gradient, so for an
/// unbiased estimator their difference is pure noise. `analytic` holds the
/// minibatch mean and `comparison` the reference; `within_3se` counts
/// components within three combined standard errors.
pub fn gradient_unbiasedness_mc(
    critic: &NetSpec,
    generator: Option<&NetSpec>,
    spec: &KernelSpec,
    cfg: &UnbiasednessConfig,
    rng: &mut RngState,
) -> Result<GradReport> {
    if cfg.minibatch < 2 || cfg.reps < 2 || cfg.proxy_block < 2 {
        return Err(Error::InvalidInput("minibatch, reps and proxy block must all be at least 2".into()));
    }
    let blocks = cfg.proxy_n / cfg.proxy_block;
    if blocks < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2 * cfg.proxy_block,
            found: cfg.proxy_n,
        });
    }
    if cfg.data.dim() != critic.input_dim {
        return Err(Error::DimensionMismatch {
            expected: critic.input_dim,
            found: cfg.data.dim(),
        });
    }
    let base = RngState::new(rng.next_u64(), rng.stream());
    let small = batch_grads(critic, generator, spec, cfg, cfg.minibatch, cfg.reps, &base.derive(0))?;
    let large = batch_grads(critic, generator, spec, cfg, cfg.proxy_block, blocks, &base.derive(1))?;
    let (mean_s, se_s) = grad_stats(&small);
    let (mean_l, se_l) = grad_stats(&large);
    let within = mean_s
        .iter()
        .zip(&mean_l)
        .zip(se_s.iter().zip(&se_l))
        .filter(|((a, b), (sa, sb))| (**a - **b).abs() <= 3.0 * (**sa * **sa + **sb * **sb).sqrt())
        .count() as f64
        / mean_s.len() as f64;
    let mut report = GradReport::compare(mean_s, mean_l);
    report.analytic_stderr = Some(se_s);
    report.comparison_stderr = Some(se_l);
    report.within_3se = Some(within);
    Ok(report)
}
