//! MMD-family statistics: U- and V-statistic squared MMD, block averaging,
//! KID, energy distance, the Cramér surrogate, witness functions and energy
//! scores.
//!
//! All pair sums are reduced row by row and the per-row partials are added
//! in index order, so the result does not depend on the rayon pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{accumulate_grad, rho, KernelSpec};
use crate::num::{mean_std_stderr, FeatureMatrix, RngState};

/// Below this many pair evaluations a reduction runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 14;

/// Attempts per interpolate before the gradient penalty gives up on a
/// non-differentiable point.
const PENALTY_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
}

impl Estimate {
    pub fn point(value: f64) -> Self {
        Self {
            value,
            std_error: None,
            block_size: None,
            reps: None,
        }
    }

    /// Mean of repeated values; `std_error` is attached for two or more.
    pub fn from_reps(values: &[f64], block_size: Option<usize>) -> Self {
        let (mean, _, se) = mean_std_stderr(values);
        Self {
            value: mean,
            std_error: (values.len() >= 2).then_some(se),
            block_size,
            reps: Some(values.len()),
        }
    }
}

fn reduce_rows(rows: usize, work: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> f64 {
    if work < PAR_THRESHOLD {
        (0..rows).map(f).sum()
    } else {
        let partial: Vec<f64> = (0..rows).into_par_iter().map(f).collect();
        partial.iter().sum()
    }
}

/// `sum_{i != j} f(x_i, x_j)` for a symmetric `f`, as twice the upper
/// triangle.
fn within_sum(x: &FeatureMatrix, f: impl Fn(&[f64], &[f64]) -> f64 + Sync + Send) -> f64 {
    let m = x.rows();
    let upper = reduce_rows(m, m * m / 2 * x.cols(), |i| {
        let xi = x.row(i);
        (i + 1..m).map(|j| f(xi, x.row(j))).sum::<f64>()
    });
    2.0 * upper
}

/// `sum_i sum_j f(x_i, y_j)` for a symmetric `f`. The canonically smaller
/// matrix drives the outer loop so swapping the arguments gives the same
/// bits.
fn cross_sum(x: &FeatureMatrix, y: &FeatureMatrix, f: impl Fn(&[f64], &[f64]) -> f64 + Sync + Send) -> f64 {
    let (a, b) = if x.canonical_cmp(y).is_gt() { (y, x) } else { (x, y) };
    reduce_rows(a.rows(), a.rows() * b.rows() * a.cols(), |i| {
        let ai = a.row(i);
        b.iter_rows().map(|bj| f(ai, bj)).sum::<f64>()
    })
}

fn check_pair(spec: Option<&KernelSpec>, x: &FeatureMatrix, y: &FeatureMatrix) -> Result<()> {
    x.ensure_same_cols(y)?;
    if let Some(spec) = spec {
        spec.validate()?;
        if let Some(d) = spec.required_dim() {
            if d != x.cols() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: x.cols(),
                });
            }
        }
    }
    Ok(())
}

fn pairs(n: usize) -> f64 {
    n as f64 * (n - 1) as f64
}

/// Unbiased squared MMD (U-statistic). May be negative.
pub fn mmd2_unbiased(spec: &KernelSpec, x: &FeatureMatrix, y: &FeatureMatrix) -> Result<Estimate> {
    check_pair(Some(spec), x, y)?;
    x.ensure_rows(2)?;
    y.ensure_rows(2)?;
    Ok(Estimate::point(mmd2_unbiased_unchecked(spec, x, y)))
}

pub(crate) fn mmd2_unbiased_unchecked(spec: &KernelSpec, x: &FeatureMatrix, y: &FeatureMatrix) -> f64 {
    let k = |a: &[f64], b: &[f64]| spec.eval(a, b);
    let (m, n) = (x.rows(), y.rows());
    let kxx = within_sum(x, k) / pairs(m);
    let kyy = within_sum(y, k) / pairs(n);
    let kxy = cross_sum(x, y, k) / (m as f64 * n as f64);
    kxx + kyy - 2.0 * kxy
}

/// Biased squared MMD (V-statistic over all pairs, diagonal included).
pub fn mmd2_biased(spec: &KernelSpec, x: &FeatureMatrix, y: &FeatureMatrix) -> Result<Estimate> {
    check_pair(Some(spec), x, y)?;
    let k = |a: &[f64], b: &[f64]| spec.eval(a, b);
    let full = |z: &FeatureMatrix| {
        let diag: f64 = z.iter_rows().map(|r| k(r, r)).sum();
        (within_sum(z, k) + diag) / (z.rows() as f64).powi(2)
    };
    let (m, n) = (x.rows() as f64, y.rows() as f64);
    let value = full(x) + full(y) - 2.0 * cross_sum(x, y, k) / (m * n);
    Ok(Estimate::point(value))
}

/// Mean of `reps` unbiased MMD² values, each on `block_size` rows drawn
/// without replacement from `x` and, independently, from `y`.
///
/// Sampled indices are sorted, so a block covering all rows reproduces
/// [`mmd2_unbiased`] exactly.
pub fn mmd2_block_average(
    spec: &KernelSpec,
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    block_size: usize,
    reps: usize,
    rng: &mut RngState,
) -> Result<Estimate> {
    check_pair(Some(spec), x, y)?;
    if block_size < 2 {
        return Err(Error::InvalidInput(format!("block size must be at least 2, got {block_size}")));
    }
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be positive".into()));
    }
    let limit = x.rows().min(y.rows());
    if block_size > limit {
        return Err(Error::InvalidInput(format!(
            "block size {block_size} exceeds the smaller sample ({limit} rows)"
        )));
    }
    let base = RngState::new(rng.next_u64(), rng.stream());
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut r = base.derive(rep as u64);
            let xb = subsample(x, block_size, &mut r);
            let yb = subsample(y, block_size, &mut r);
            mmd2_unbiased_unchecked(spec, &xb, &yb)
        })
        .collect();
    Ok(Estimate::from_reps(&values, Some(block_size)))
}

fn subsample(z: &FeatureMatrix, k: usize, rng: &mut RngState) -> FeatureMatrix {
    let mut idx = rng.sample_without_replacement(z.rows(), k);
    idx.sort_unstable();
    z.select_rows(&idx)
}

pub const KID_BLOCK: usize = 1000;
pub const KID_REPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    #[serde(flatten)]
    pub estimate: Estimate,
    /// The requested block exceeded the smaller sample and was reduced.
    pub block_clamped: bool,
}

/// Kernel Inception Distance: block-averaged unbiased MMD² under the cubic
/// polynomial kernel `(<x, y> / d + 1)^3`.
///
/// `None` selects the defaults (block 1000, 100 reps). A block larger than
/// `min(m, n)` is clamped and flagged.
pub fn kid(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    block_size: Option<usize>,
    reps: Option<usize>,
    rng: &mut RngState,
) -> Result<KidEstimate> {
    x.ensure_same_cols(y)?;
    let requested = block_size.unwrap_or(KID_BLOCK);
    let limit = x.rows().min(y.rows());
    let block = requested.min(limit);
    let spec = KernelSpec::kid(x.cols());
    let estimate = mmd2_block_average(&spec, x, y, block, reps.unwrap_or(KID_REPS), rng)?;
    Ok(KidEstimate {
        estimate,
        block_clamped: block < requested,
    })
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("beta must lie in (0, 2], got {beta}")))
    }
}

/// U-statistic estimate of the energy distance with `rho = ||x - y||^beta`.
pub fn energy_distance(x: &FeatureMatrix, y: &FeatureMatrix, beta: f64) -> Result<Estimate> {
    check_beta(beta)?;
    check_pair(None, x, y)?;
    x.ensure_rows(2)?;
    y.ensure_rows(2)?;
    let r = |a: &[f64], b: &[f64]| rho(a, b, beta);
    let (m, n) = (x.rows(), y.rows());
    let wx = within_sum(x, r) / pairs(m);
    let wy = within_sum(y, r) / pairs(n);
    let c = cross_sum(x, y, r) / (m as f64 * n as f64);
    Ok(Estimate::point(c - 0.5 * wx - 0.5 * wy))
}

fn mean_norm(z: &FeatureMatrix) -> f64 {
    z.iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / z.rows() as f64
}

/// Plug-in Cramér surrogate
/// `E||X - X'|| + E||Y|| - E||X|| - E||X - Y||` with the within-X term over
/// distinct pairs. It is not a divergence: it vanishes on some `P != Q`.
pub fn cramer_surrogate(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<Estimate> {
    check_pair(None, x, y)?;
    x.ensure_rows(2)?;
    let r = |a: &[f64], b: &[f64]| rho(a, b, 1.0);
    let (m, n) = (x.rows(), y.rows());
    let wx = within_sum(x, r) / pairs(m);
    let c = cross_sum(x, y, r) / (m as f64 * n as f64);
    Ok(Estimate::point(wx + mean_norm(y) - mean_norm(x) - c))
}

/// Empirical witness `f(t) = mean_i k(x_i, t) - mean_j k(y_j, t)` at every
/// row of `t`.
pub fn witness_eval(
    spec: &KernelSpec,
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    t: &FeatureMatrix,
) -> Result<Vec<f64>> {
    check_pair(Some(spec), x, y)?;
    x.ensure_same_cols(t)?;
    let (m, n) = (x.rows() as f64, y.rows() as f64);
    Ok(t.iter_rows()
        .map(|q| {
            let a: f64 = x.iter_rows().map(|xi| spec.eval(xi, q)).sum();
            let b: f64 = y.iter_rows().map(|yj| spec.eval(yj, q)).sum();
            a / m - b / n
        })
        .collect())
}

/// Gradient of the empirical witness at `t`.
pub fn witness_grad(spec: &KernelSpec, x: &FeatureMatrix, y: &FeatureMatrix, t: &[f64]) -> Result<Vec<f64>> {
    check_pair(Some(spec), x, y)?;
    if t.len() != x.cols() {
        return Err(Error::DimensionMismatch {
            expected: x.cols(),
            found: t.len(),
        });
    }
    let d = t.len();
    let mut grad = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let (wx, wy) = (1.0 / x.rows() as f64, -1.0 / y.rows() as f64);
    for xi in x.iter_rows() {
        accumulate_grad(spec, xi, t, wx, &mut scratch, &mut grad)?;
    }
    for yj in y.iter_rows() {
        accumulate_grad(spec, yj, t, wy, &mut scratch, &mut grad)?;
    }
    Ok(grad)
}

/// Gradient penalty `mean (||grad f(u)|| - 1)^2` over `n_interp` random
/// interpolates `u = a x_i + (1 - a) y_j`.
///
/// A draw landing on a non-differentiable point of the kernel is redrawn,
/// up to a fixed number of attempts.
pub fn witness_grad_penalty(
    spec: &KernelSpec,
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    rng: &mut RngState,
    n_interp: usize,
) -> Result<Estimate> {
    check_pair(Some(spec), x, y)?;
    if n_interp == 0 {
        return Err(Error::InvalidInput("n_interp must be positive".into()));
    }
    let base = RngState::new(rng.next_u64(), rng.stream());
    let values = (0..n_interp)
        .into_par_iter()
        .map(|s| {
            let mut r = base.derive(s as u64);
            let mut last = None;
            for _ in 0..PENALTY_RETRIES {
                let xi = x.row(r.index(x.rows()));
                let yj = y.row(r.index(y.rows()));
                let a = r.uniform();
                let u: Vec<f64> = xi.iter().zip(yj).map(|(p, q)| a * p + (1.0 - a) * q).collect();
                match witness_grad(spec, x, y, &u) {
                    Ok(g) => {
                        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                        return Ok((norm - 1.0).powi(2));
                    }
                    Err(e @ Error::NonDifferentiable(_)) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_reps(&values, None))
}

/// Energy score `S(P, y) = 1/2 E rho(X, X') - E rho(X, y)` with the
/// within-sample term over distinct pairs.
pub fn energy_score(x: &FeatureMatrix, y: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    x.ensure_rows(2)?;
    if y.len() != x.cols() {
        return Err(Error::DimensionMismatch {
            expected: x.cols(),
            found: y.len(),
        });
    }
    let w = within_sum(x, |a, b| rho(a, b, beta)) / pairs(x.rows());
    Ok(0.5 * w - mean_rho_to(x, y, beta))
}

fn mean_rho_to(x: &FeatureMatrix, y: &[f64], beta: f64) -> f64 {
    x.iter_rows().map(|r| rho(r, y, beta)).sum::<f64>() / x.rows() as f64
}

/// `mean_j S(P, y_j)`, the expected score of the model `x` on data `y`.
pub fn expected_energy_score(x: &FeatureMatrix, y: &FeatureMatrix, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    check_pair(None, x, y)?;
    x.ensure_rows(2)?;
    let w = within_sum(x, |a, b| rho(a, b, beta)) / pairs(x.rows());
    let c = cross_sum(x, y, |a, b| rho(a, b, beta)) / (x.rows() as f64 * y.rows() as f64);
    Ok(0.5 * w - c)
}

/// `S(Q, Q) = -1/2 E rho(Y, Y')`, the expected score of a sample against
/// itself.
pub fn self_energy_score(y: &FeatureMatrix, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    y.ensure_rows(2)?;
    Ok(-0.5 * within_sum(y, |a, b| rho(a, b, beta)) / pairs(y.rows()))
}

/// Score-based Cramér objective
/// `-1/2 E||X - X'|| + E||X - Y|| - E||Y||`.
pub fn score_based_cramer_objective(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    check_pair(None, x, y)?;
    x.ensure_rows(2)?;
    let r = |a: &[f64], b: &[f64]| rho(a, b, 1.0);
    let w = within_sum(x, r) / pairs(x.rows());
    let c = cross_sum(x, y, r) / (x.rows() as f64 * y.rows() as f64);
    Ok(-0.5 * w + c - mean_norm(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{DEFAULT_ALPHAS, DEFAULT_SIGMAS};
    use proptest::prelude::*;

    fn col(v: &[f64]) -> FeatureMatrix {
        FeatureMatrix::column(v).unwrap()
    }

    fn gauss(rng: &mut RngState, rows: usize, cols: usize, shift: f64) -> FeatureMatrix {
        let data = rng.gaussians(rows * cols).into_iter().map(|v| v + shift).collect();
        FeatureMatrix::new(rows, cols, data).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn hand_fixtures() {
        let (x, y) = (col(&[0.0, 2.0]), col(&[1.0, 1.0]));
        assert_eq!(mmd2_unbiased(&KernelSpec::Dot, &x, &y).unwrap().value, -1.0);
        assert_eq!(mmd2_biased(&KernelSpec::Dot, &x, &y).unwrap().value, 0.0);

        let a = col(&[0.7, 0.7]);
        let spec = KernelSpec::rbf(&[1.0]).unwrap();
        assert_eq!(mmd2_unbiased(&spec, &a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn too_few_rows() {
        let spec = KernelSpec::Dot;
        assert!(matches!(
            mmd2_unbiased(&spec, &col(&[1.0]), &col(&[1.0, 2.0])),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(mmd2_biased(&spec, &col(&[1.0]), &col(&[2.0])).is_ok());
    }

    #[test]
    fn biased_is_zero_on_identical_samples() {
        let mut rng = RngState::new(5, 0);
        let x = gauss(&mut rng, 30, 4, 0.0);
        let v = mmd2_biased(&KernelSpec::rq(&DEFAULT_ALPHAS).unwrap(), &x, &x).unwrap();
        assert!(v.value.abs() <= 1e-12);
    }

    #[test]
    fn block_average_full_block_equals_unbiased() {
        let mut rng = RngState::new(9, 1);
        let x = gauss(&mut rng, 40, 3, 0.0);
        let y = gauss(&mut rng, 40, 3, 0.3);
        let spec = KernelSpec::rbf(&DEFAULT_SIGMAS).unwrap();
        let full = mmd2_unbiased(&spec, &x, &y).unwrap().value;
        let blk = mmd2_block_average(&spec, &x, &y, 40, 1, &mut RngState::new(1, 0)).unwrap();
        assert_eq!(blk.value, full);
        assert_eq!(blk.std_error, None);
        assert_eq!(blk.reps, Some(1));
    }

    #[test]
    fn block_average_is_deterministic_and_validates() {
        let mut rng = RngState::new(10, 0);
        let x = gauss(&mut rng, 60, 2, 0.0);
        let y = gauss(&mut rng, 50, 2, 0.0);
        let spec = KernelSpec::rq(&DEFAULT_ALPHAS).unwrap();
        let a = mmd2_block_average(&spec, &x, &y, 20, 7, &mut RngState::new(3, 0)).unwrap();
        let b = mmd2_block_average(&spec, &x, &y, 20, 7, &mut RngState::new(3, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.std_error.is_some());
        assert!(mmd2_block_average(&spec, &x, &y, 51, 1, &mut RngState::new(3, 0)).is_err());
        assert!(mmd2_block_average(&spec, &x, &y, 1, 1, &mut RngState::new(3, 0)).is_err());
    }

    #[test]
    fn block_average_same_distribution_is_centered() {
        let mut rng = RngState::new(12, 0);
        let x = gauss(&mut rng, 400, 3, 0.0);
        let y = gauss(&mut rng, 400, 3, 0.0);
        let spec = KernelSpec::rbf(&[1.0, 2.0]).unwrap();
        let e = mmd2_block_average(&spec, &x, &y, 50, 200, &mut rng).unwrap();
        assert!(e.value.abs() <= 3.0 * e.std_error.unwrap(), "{e:?}");
    }

    #[test]
    fn kid_constant_and_shifted() {
        let p = FeatureMatrix::new(20, 3, vec![0.4; 60]).unwrap();
        let k = kid(&p, &p, Some(10), Some(3), &mut RngState::new(0, 0)).unwrap();
        assert!(k.estimate.value.abs() <= 1e-12);

        let mut rng = RngState::new(2, 0);
        let x = gauss(&mut rng, 400, 16, 0.0);
        let y = gauss(&mut rng, 400, 16, 1.0);
        let k = kid(&x, &y, Some(100), Some(50), &mut rng).unwrap();
        assert!(!k.block_clamped);
        assert!(k.estimate.value > 5.0 * k.estimate.std_error.unwrap());

        let k = kid(&x, &y, None, Some(2), &mut rng).unwrap();
        assert!(k.block_clamped);
        assert_eq!(k.estimate.block_size, Some(400));
    }

    #[test]
    fn energy_distance_fixtures() {
        for t in [0.5, 1.0, 7.0] {
            let (x, y) = (col(&[0.0, 0.0]), col(&[t, t]));
            assert_eq!(energy_distance(&x, &y, 1.0).unwrap().value, t);
            assert_eq!(cramer_surrogate(&x, &y).unwrap().value, 0.0);
            assert_eq!(score_based_cramer_objective(&x, &y).unwrap(), 0.0);
            assert_eq!(score_based_cramer_objective(&x, &col(&[t])).unwrap(), 0.0);
        }
        assert_eq!(cramer_surrogate(&col(&[0.0, 0.0]), &col(&[0.0])).unwrap().value, 0.0);
        assert!(energy_distance(&col(&[0.0, 1.0]), &col(&[0.0, 1.0]), 2.5).is_err());
    }

    #[test]
    fn energy_distance_beta_two_is_mean_difference() {
        let mut rng = RngState::new(14, 0);
        let x = gauss(&mut rng, 25, 3, 0.0);
        let y = gauss(&mut rng, 31, 3, 0.5);
        let ed = energy_distance(&x, &y, 2.0).unwrap().value;
        // With beta = 2 the U-statistic is the unbiased estimate of
        // ||mu_x - mu_y||^2, i.e. the plug-in value minus tr(S_x)/m + tr(S_y)/n.
        let (mx, my) = (x.column_means(), y.column_means());
        let tr = |z: &FeatureMatrix, mu: &[f64]| {
            z.iter_rows()
                .map(|r| r.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum::<f64>()
                / (z.rows() - 1) as f64
        };
        let oracle: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            - tr(&x, &mx) / 25.0
            - tr(&y, &my) / 31.0;
        assert!((ed - oracle).abs() <= 1e-10 * oracle.max(1.0), "{ed} vs {oracle}");
    }

    #[test]
    fn energy_scores_combine_to_energy_distance() {
        let mut rng = RngState::new(15, 0);
        let x = gauss(&mut rng, 30, 2, 0.0);
        let y = gauss(&mut rng, 20, 2, 1.0);
        for beta in [0.5, 1.0, 1.5] {
            let sqq = self_energy_score(&y, beta).unwrap();
            let spq = expected_energy_score(&x, &y, beta).unwrap();
            let per_point: f64 = y
                .iter_rows()
                .map(|r| energy_score(&x, r, beta).unwrap())
                .sum::<f64>()
                / y.rows() as f64;
            assert!(rel(spq, per_point) <= 1e-12);
            let ed = energy_distance(&x, &y, beta).unwrap().value;
            assert!(rel(sqq - spq, ed) <= 1e-12);
        }
        assert_eq!(energy_score(&col(&[0.0, 0.0]), &[3.0], 1.0).unwrap(), -3.0);
        assert_eq!(energy_score(&col(&[0.0, 2.0]), &[0.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn score_based_objective_matches_term_by_term_oracle() {
        let mut rng = RngState::new(16, 0);
        let x = gauss(&mut rng, 7, 2, 0.0);
        let y = gauss(&mut rng, 5, 2, 0.5);
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let dist = |a: &[f64], b: &[f64]| norm(&a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
        let mut wxx = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    wxx += dist(x.row(i), x.row(j));
                }
            }
        }
        let mut cxy = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                cxy += dist(x.row(i), y.row(j));
            }
        }
        let ny: f64 = (0..5).map(|j| norm(y.row(j))).sum();
        let oracle = -0.5 * wxx / 42.0 + cxy / 35.0 - ny / 5.0;
        assert!(rel(score_based_cramer_objective(&x, &y).unwrap(), oracle) <= 1e-12);
    }

    #[test]
    fn witness_fixtures() {
        let mut rng = RngState::new(17, 0);
        let x = gauss(&mut rng, 10, 3, 0.0);
        let y = gauss(&mut rng, 12, 3, 0.2);
        let t = gauss(&mut rng, 4, 3, 0.0);
        let spec = KernelSpec::rq(&DEFAULT_ALPHAS).unwrap();
        assert!(witness_eval(&spec, &x, &x, &t).unwrap().iter().all(|&v| v == 0.0));

        let f = witness_eval(&KernelSpec::Dot, &x, &y, &t).unwrap();
        let (mx, my) = (x.column_means(), y.column_means());
        for (i, v) in f.iter().enumerate() {
            let oracle: f64 = (0..3).map(|c| (mx[c] - my[c]) * t.row(i)[c]).sum();
            assert!((v - oracle).abs() <= 1e-12);
        }

        let far = FeatureMatrix::from_rows(&[[1e4, 1e4, 1e4]]).unwrap();
        let rbf = KernelSpec::rbf(&DEFAULT_SIGMAS).unwrap();
        assert!(witness_eval(&rbf, &x, &y, &far).unwrap()[0].abs() <= 1e-8);
    }

    #[test]
    fn witness_gradient_matches_finite_differences() {
        let mut rng = RngState::new(18, 0);
        let x = gauss(&mut rng, 9, 3, 0.0);
        let y = gauss(&mut rng, 11, 3, 0.7);
        for spec in [
            KernelSpec::rq(&DEFAULT_ALPHAS).unwrap(),
            KernelSpec::rbf(&[0.5, 1.0]).unwrap(),
            KernelSpec::distance(1.0, 3).unwrap(),
        ] {
            let t = rng.gaussians(3);
            let g = witness_grad(&spec, &x, &y, &t).unwrap();
            let eps = 1e-6;
            for c in 0..3 {
                let (mut tp, mut tm) = (t.clone(), t.clone());
                tp[c] += eps;
                tm[c] -= eps;
                let q = FeatureMatrix::from_rows(&[tp, tm]).unwrap();
                let f = witness_eval(&spec, &x, &y, &q).unwrap();
                let fd = (f[0] - f[1]) / (2.0 * eps);
                let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!((g[c] - fd).abs() <= 1e-6 * g[c].abs().max(fd.abs()).max(1e-3 * scale));
            }
        }
    }

    #[test]
    fn gradient_penalty_fixtures() {
        let mut rng = RngState::new(19, 0);
        let x = gauss(&mut rng, 10, 2, 0.0);
        let y = gauss(&mut rng, 10, 2, 1.0);
        let pen = witness_grad_penalty(&KernelSpec::Dot, &x, &y, &mut rng, 16).unwrap();
        let (mx, my) = (x.column_means(), y.column_means());
        let norm = mx.iter().zip(&my).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((pen.value - (norm - 1.0).powi(2)).abs() <= 1e-12);

        let spec = KernelSpec::rbf(&[1.0]).unwrap();
        let pen = witness_grad_penalty(&spec, &x, &x, &mut rng, 8).unwrap();
        assert!((pen.value - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gradient_penalty_gives_up_on_degenerate_distance_inputs() {
        // every interpolate coincides with the sample point
        let p = col(&[1.0, 1.0]);
        let spec = KernelSpec::distance(1.0, 1).unwrap();
        let r = witness_grad_penalty(&spec, &p, &p, &mut RngState::new(0, 0), 3);
        assert!(matches!(r, Err(Error::NonDifferentiable(_))));
    }

    #[test]
    fn witness_sign_follows_population_ordering() {
        let mut rng = RngState::new(20, 0);
        let x = gauss(&mut rng, 2000, 1, 1.0);
        let y = gauss(&mut rng, 2000, 1, 0.0);
        let spec = KernelSpec::rq(&DEFAULT_ALPHAS).unwrap();
        let t = col(&[1.0, 0.0]);
        let f = witness_eval(&spec, &x, &y, &t).unwrap();
        // bootstrap-free MC margin: spread of per-sample contributions
        let contrib: Vec<f64> = x
            .iter_rows()
            .map(|r| spec.eval(r, &[1.0]) - spec.eval(r, &[0.0]))
            .chain(y.iter_rows().map(|r| spec.eval(r, &[0.0]) - spec.eval(r, &[1.0])))
            .collect();
        let (_, _, se) = mean_std_stderr(&contrib);
        assert!(f[0] - f[1] > 3.0 * 2.0 * se, "{} vs {}", f[0] - f[1], se);
    }

    #[test]
    fn unbiased_on_fresh_samples() {
        let spec = KernelSpec::rbf(&[1.0]).unwrap();
        let root = RngState::new(21, 0);
        let values: Vec<f64> = (0..500)
            .map(|r| {
                let mut g = root.derive(r);
                let x = gauss(&mut g, 20, 2, 0.0);
                let y = gauss(&mut g, 20, 2, 0.0);
                mmd2_unbiased(&spec, &x, &y).unwrap().value
            })
            .collect();
        let (mean, _, se) = mean_std_stderr(&values);
        assert!(mean.abs() <= 3.0 * se);
    }

    #[test]
    fn biased_and_unbiased_share_a_limit() {
        let mut rng = RngState::new(22, 0);
        let x = gauss(&mut rng, 1500, 2, 0.0);
        let y = gauss(&mut rng, 1500, 2, 0.0);
        let spec = KernelSpec::rbf(&[1.0]).unwrap();
        let u = mmd2_unbiased(&spec, &x, &y).unwrap().value;
        let b = mmd2_biased(&spec, &x, &y).unwrap().value;
        // V - U = (E k(x,x) - mean off-diagonal) (1/m + 1/n) which is O(1/m)
        assert!((b - u).abs() <= 2.0 / 1500.0 * 2.0);
    }

    fn matrix_strategy(max_rows: usize, cols: usize) -> impl Strategy<Value = FeatureMatrix> {
        (2..=max_rows).prop_flat_map(move |r| {
            prop::collection::vec(-3.0f64..3.0, r * cols)
                .prop_map(move |d| FeatureMatrix::new(r, cols, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exchange_symmetry_is_exact(x in matrix_strategy(12, 3), y in matrix_strategy(12, 3)) {
            for spec in [
                KernelSpec::rq(&DEFAULT_ALPHAS).unwrap(),
                KernelSpec::Dot,
                KernelSpec::distance(1.3, 3).unwrap(),
            ] {
                let a = mmd2_unbiased(&spec, &x, &y).unwrap().value;
                let b = mmd2_unbiased(&spec, &y, &x).unwrap().value;
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn distance_mmd_equals_energy_distance(
            x in matrix_strategy(15, 2),
            y in matrix_strategy(15, 2).prop_map(|m| m.translated(&[2.0, -1.0]).unwrap()),
            z0 in prop::collection::vec(-5.0f64..5.0, 2),
            beta in 0.1f64..=2.0,
        ) {
            let ed = energy_distance(&x, &y, beta).unwrap().value;
            let spec = KernelSpec::distance_at(beta, z0).unwrap();
            let mmd = mmd2_unbiased(&spec, &x, &y).unwrap().value;
            prop_assert!(rel(ed, mmd) <= 1e-12, "{} vs {}", ed, mmd);
        }

        #[test]
        fn distance_mmd_translation_invariant(
            x in matrix_strategy(10, 2),
            y in matrix_strategy(10, 2).prop_map(|m| m.translated(&[1.5, 0.0]).unwrap()),
            shift in prop::collection::vec(-10.0f64..10.0, 2),
        ) {
            let spec = KernelSpec::distance(1.0, 2).unwrap();
            let a = mmd2_unbiased(&spec, &x, &y).unwrap().value;
            let b = mmd2_unbiased(
                &spec,
                &x.translated(&shift).unwrap(),
                &y.translated(&shift).unwrap(),
            ).unwrap().value;
            prop_assert!(rel(a, b) <= 1e-10, "{} vs {}", a, b);
        }

        #[test]
        fn kernel_scaling_is_equivariant(x in matrix_strategy(10, 2), y in matrix_strategy(10, 2)) {
            let one = KernelSpec::poly(1, 1.0, 0.0).unwrap();
            let two = KernelSpec::poly(1, 2.0, 0.0).unwrap();
            let a = mmd2_unbiased(&one, &x, &y).unwrap().value;
            let b = mmd2_unbiased(&two, &x, &y).unwrap().value;
            prop_assert_eq!(2.0 * a, b);
        }

        #[test]
        fn biased_is_nonnegative_for_psd_kernels(x in matrix_strategy(10, 3), y in matrix_strategy(10, 3)) {
            let spec = KernelSpec::rbf(&[1.0, 3.0]).unwrap();
            prop_assert!(mmd2_biased(&spec, &x, &y).unwrap().value >= -1e-12);
        }
    }
}
