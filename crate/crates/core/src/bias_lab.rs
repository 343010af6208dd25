//! Monte-Carlo demonstrations of estimator bias: critic selection by data
//! splitting, KID/FID curves over sample size and FID ordering reversals.
//!
//! Every experiment runs its repetitions on child streams derived from one
//! base stream and aggregates them in repetition order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::kid;
use crate::num::{mean_std_stderr, psd_sqrt, std_normal_cdf, sym_eig, FeatureMatrix, RngState, SymMatrix};
use crate::scores::{
    censored_normal_moments, expected_fid_1d_normal, fid_estimate, fit_moments, frechet_distance,
    GaussianMoments, SampleCount,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(u64),
    Float(f64),
    Text(String),
    IntList(Vec<u64>),
}

impl From<bool> for ParamValue {
    fn from(v: bool) -> Self {
        Self::Bool(v)
    }
}
impl From<u64> for ParamValue {
    fn from(v: u64) -> Self {
        Self::Int(v)
    }
}
impl From<usize> for ParamValue {
    fn from(v: usize) -> Self {
        Self::Int(v as u64)
    }
}
impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        Self::Float(v)
    }
}
impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        Self::Text(v.to_string())
    }
}
impl From<&[usize]> for ParamValue {
    fn from(v: &[usize]) -> Self {
        Self::IntList(v.iter().map(|&n| n as u64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub n: u64,
    pub series: String,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub analytic: Option<f64>,
}

impl BiasRow {
    fn from_values(n: usize, series: &str, values: &[f64], analytic: Option<f64>) -> Self {
        let (mean, std, stderr) = mean_std_stderr(values);
        Self {
            n: n as u64,
            series: series.to_string(),
            mean,
            std,
            stderr,
            analytic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub experiment: String,
    pub parameters: BTreeMap<String, ParamValue>,
    /// Sorted by `n`, then by series label.
    pub rows: Vec<BiasRow>,
    pub summary: BTreeMap<String, ParamValue>,
}

impl BiasReport {
    fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            parameters: BTreeMap::new(),
            rows: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    fn param(mut self, key: &str, v: impl Into<ParamValue>) -> Self {
        self.parameters.insert(key.to_string(), v.into());
        self
    }

    fn note(&mut self, key: &str, v: impl Into<ParamValue>) {
        self.summary.insert(key.to_string(), v.into());
    }

    fn finish(mut self) -> Self {
        self.rows
            .sort_by(|a, b| a.n.cmp(&b.n).then_with(|| a.series.cmp(&b.series)));
        self
    }

    pub fn row(&self, n: u64, series: &str) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.n == n && r.series == series)
    }

    pub fn summary_f64(&self, key: &str) -> Option<f64> {
        match self.summary.get(key)? {
            ParamValue::Float(v) => Some(*v),
            ParamValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    /// Table with columns `n,mean,std,stderr,analytic,series`; missing
    /// analytic values are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mean,std,stderr,analytic,series\n");
        for r in &self.rows {
            let analytic = r.analytic.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{},{}",
                r.n, r.mean, r.std, r.stderr, analytic, r.series
            );
        }
        out
    }
}

fn base_stream(rng: &mut RngState) -> RngState {
    RngState::new(rng.next_u64(), rng.stream())
}

fn run_reps<T: Send>(reps: usize, base: &RngState, f: impl Fn(&mut RngState) -> T + Sync + Send) -> Vec<T> {
    (0..reps)
        .into_par_iter()
        .map(|r| f(&mut base.derive(r as u64)))
        .collect()
}

fn require(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg.into()))
    }
}

/// `1 - 2 Phi(-1/sqrt 2)`: expected population value of a critic chosen
/// from one training pair of `N(1, 1)` vs `N(0, 1)`.
pub fn wasserstein_analytic() -> f64 {
    1.0 - 2.0 * std_normal_cdf(-std::f64::consts::FRAC_1_SQRT_2)
}

/// Critic selection by data splitting for `P = N(1, 1)`, `Q = N(0, 1)`.
///
/// Each repetition draws one training pair and picks `f(t) = t` if
/// `x > y`, else `f(t) = -t`; the selected critic is scored by its
/// population value `+1` or `-1`. The `stubborn` series always keeps
/// `f(t) = t`.
pub fn wasserstein_splitting_bias(reps: usize, rng: &mut RngState) -> Result<BiasReport> {
    require(reps >= 1, "reps must be positive")?;
    let base = base_stream(rng);
    let values = run_reps(reps, &base, |r| {
        let x = 1.0 + r.gaussian();
        let y = r.gaussian();
        if x > y {
            1.0
        } else {
            -1.0
        }
    });
    let analytic = wasserstein_analytic();
    let mut report = BiasReport::new("wasserstein").param("reps", reps);
    report.rows.push(BiasRow::from_values(1, "adaptive", &values, Some(analytic)));
    report.rows.push(BiasRow::from_values(1, "stubborn", &vec![1.0; reps], Some(1.0)));
    report.note("analytic", analytic);
    report.note("supremum", 1.0);
    Ok(report.finish())
}

/// Unbiased quadratic form `theta^T A theta` of the squared linear-kernel
/// MMD between projected samples, as a symmetric 2 x 2 matrix.
fn linear_mmd_form(x: &FeatureMatrix, y: &FeatureMatrix) -> SymMatrix {
    let d = x.cols();
    let sums = |z: &FeatureMatrix| {
        let mut s = vec![0.0; d];
        let mut g = vec![0.0; d * d];
        for r in z.iter_rows() {
            for i in 0..d {
                s[i] += r[i];
                for j in 0..d {
                    g[i * d + j] += r[i] * r[j];
                }
            }
        }
        (s, g)
    };
    let (sx, gx) = sums(x);
    let (sy, gy) = sums(y);
    let (m, n) = (x.rows() as f64, y.rows() as f64);
    SymMatrix::from_upper_fn(d, |i, j| {
        (sx[i] * sx[j] - gx[i * d + j]) / (m * (m - 1.0)) + (sy[i] * sy[j] - gy[i * d + j]) / (n * (n - 1.0))
            - (sx[i] * sy[j] + sy[i] * sx[j]) / (m * n)
    })
}

/// Critic selection for the linear-kernel MMD between `N((1, 0), I)` and
/// `N((0, 0), I)`: the unit direction maximising the training estimate is
/// the top eigenvector of the training quadratic form, and its population
/// objective is `theta_1^2` (supremum 1).
pub fn max_mmd_splitting_bias(m_tr: usize, n_tr: usize, reps: usize, rng: &mut RngState) -> Result<BiasReport> {
    require(m_tr >= 2 && n_tr >= 2, "training samples need at least two rows")?;
    require(reps >= 1, "reps must be positive")?;
    let base = base_stream(rng);
    let values = run_reps(reps, &base, |r| -> Result<f64> {
        let mut xd = r.gaussians(2 * m_tr);
        xd.iter_mut().step_by(2).for_each(|v| *v += 1.0);
        let x = FeatureMatrix::new(m_tr, 2, xd)?;
        let y = FeatureMatrix::new(n_tr, 2, r.gaussians(2 * n_tr))?;
        let eig = sym_eig(&linear_mmd_form(&x, &y))?;
        Ok(eig.vector(0)[0].powi(2))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut report = BiasReport::new("max-mmd")
        .param("m_tr", m_tr)
        .param("n_tr", n_tr)
        .param("reps", reps);
    report.rows.push(BiasRow::from_values(m_tr, "theta1_sq", &values, None));
    report.note("supremum", 1.0);
    report.note("max_theta1_sq", max);
    Ok(report.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Kid,
    Fid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistPair {
    /// Both samples from `N(0, I_d)`.
    Same,
    /// Second sample from `N(offset e_1, I_d)`.
    Shifted { offset: f64 },
}

/// Largest KID block used by [`score_bias_curves`].
pub const CURVE_KID_BLOCK: usize = 100;

/// Mean and spread of KID or FID between fresh Gaussian samples of size
/// `n`, for every `n` in `n_list`.
///
/// KID uses blocks of `min(100, n)` and `max(1, n / block)` block
/// repetitions, so each estimate touches every row about once.
pub fn score_bias_curves(
    metric: Metric,
    d: usize,
    pair: DistPair,
    n_list: &[usize],
    reps: usize,
    rng: &mut RngState,
) -> Result<BiasReport> {
    require(d >= 1, "dimension must be positive")?;
    require(reps >= 1, "reps must be positive")?;
    require(!n_list.is_empty(), "n_list is empty")?;
    require(n_list.iter().all(|&n| n >= 2), "every n must be at least 2")?;
    let offset = match pair {
        DistPair::Same => 0.0,
        DistPair::Shifted { offset } => offset,
    };
    let analytic = match metric {
        Metric::Fid => Some(offset * offset),
        Metric::Kid if offset == 0.0 => Some(0.0),
        Metric::Kid => None,
    };
    let base = base_stream(rng);
    let mut report = BiasReport::new(match metric {
        Metric::Kid => "kid-curve",
        Metric::Fid => "fid-curve",
    })
    .param("d", d)
    .param("offset", offset)
    .param("n_list", n_list)
    .param("reps", reps);
    for (k, &n) in n_list.iter().enumerate() {
        let stream = base.derive(k as u64);
        let values = run_reps(reps, &stream, |r| -> Result<f64> {
            let x = FeatureMatrix::new(n, d, r.gaussians(n * d))?;
            let mut yd = r.gaussians(n * d);
            yd.iter_mut().step_by(d).for_each(|v| *v += offset);
            let y = FeatureMatrix::new(n, d, yd)?;
            match metric {
                Metric::Fid => Ok(fid_estimate(&x, &y)?.value),
                Metric::Kid => {
                    let block = CURVE_KID_BLOCK.min(n);
                    let est = kid(&x, &y, Some(block), Some((n / block).max(1)), r)?;
                    Ok(est.estimate.value)
                }
            }
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        report.rows.push(BiasRow::from_values(n, "estimate", &values, analytic));
    }
    Ok(report.finish())
}

fn fid_against_exact(sample: &[f64], q: &GaussianMoments) -> Result<f64> {
    let g = fit_moments(&FeatureMatrix::column(sample)?)?;
    Ok(frechet_distance(&g, q)?.value)
}

/// One-dimensional ordering reversal: `P1 = N(0, (1 - 1/m)^2)` is closer to
/// `Q = N(0, 1)` than `P2 = Q` is only in expectation of the plug-in
/// estimator, not in truth.
///
/// `Q` enters through its exact moments. The two samples share their
/// Gaussian draws (the `P1` sample is the `P2` sample scaled by
/// `1 - 1/m`), so the standard error of the difference comes from paired
/// differences.
pub fn fid_ordering_reversal_1d(m: usize, reps: usize, rng: &mut RngState) -> Result<BiasReport> {
    require(m >= 2, "m must be at least 2")?;
    require(reps >= 2, "reps must be at least 2")?;
    let scale = 1.0 - 1.0 / m as f64;
    let q = GaussianMoments::new(vec![0.0], SymMatrix::identity(1))?;
    let base = base_stream(rng);
    let pairs = run_reps(reps, &base, |r| -> Result<(f64, f64)> {
        let z = r.gaussians(m);
        let p1: Vec<f64> = z.iter().map(|v| scale * v).collect();
        Ok((fid_against_exact(&p1, &q)?, fid_against_exact(&z, &q)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let e1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let e2: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();

    let count = SampleCount::Finite(m as u64);
    let a1 = expected_fid_1d_normal(0.0, scale, 0.0, 1.0, count, SampleCount::Infinite)?;
    let a2 = expected_fid_1d_normal(0.0, 1.0, 0.0, 1.0, count, SampleCount::Infinite)?;
    let mut report = BiasReport::new("fid-reversal-1d").param("m", m).param("reps", reps);
    report.rows.push(BiasRow::from_values(m, "P1", &e1, Some(a1)));
    report.rows.push(BiasRow::from_values(m, "P2", &e2, Some(a2)));
    let diff_row = BiasRow::from_values(m, "difference", &diff, Some(a1 - a2));
    let true1 = 1.0 / (m * m) as f64;
    report.note("true_fid_p1", true1);
    report.note("true_fid_p2", 0.0);
    report.note("analytic_difference", a1 - a2);
    report.note("mc_difference", diff_row.mean);
    report.note("mc_difference_stderr", diff_row.stderr);
    report.note("estimates_reversed", diff_row.mean + 3.0 * diff_row.stderr < 0.0);
    report.rows.push(diff_row);
    Ok(report.finish())
}

/// Settings for [`fid_ordering_reversal_relu`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluReversalConfig {
    pub d: usize,
    pub m_list: Vec<usize>,
    /// Plug-in estimates per sample size.
    pub reps: usize,
    /// Monte-Carlo draws per ground-truth batch.
    pub mc_samples: usize,
    /// Independent ground-truth batches; their spread gives the standard
    /// error of the true FIDs.
    pub batches: usize,
}

impl ReluReversalConfig {
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            d,
            m_list: vec![m],
            reps: 10,
            mc_samples: 100_000,
            batches: 5,
        }
    }
}

fn sample_censored(mu: &[f64], root: &SymMatrix, rows: usize, r: &mut RngState) -> Result<FeatureMatrix> {
    let d = mu.len();
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let z = r.gaussians(d);
        let v = root.mul_vec(&z);
        data.extend(v.iter().zip(mu).map(|(a, b)| (a + b).max(0.0)));
    }
    FeatureMatrix::new(rows, d, data)
}

/// High-dimensional censored-normal analogue of the ordering reversal:
/// `P1 = relu(N(0, I))`, `P2 = relu(N(1, 0.8 S + 0.2 I))`,
/// `Q = relu(N(1, I))` with `S = (4/d) C C^T` for a seeded Gaussian `C`.
///
/// Reports true FIDs (moments of the censored normals, averaged over
/// Monte-Carlo batches) and plug-in estimates from `m` samples against the
/// true moments of `Q`. Whether the estimates reverse the true order
/// depends on the draw of `C`, so it is reported, not asserted.
pub fn fid_ordering_reversal_relu(cfg: &ReluReversalConfig, rng: &mut RngState) -> Result<BiasReport> {
    let d = cfg.d;
    require(d >= 2, "d must be at least 2")?;
    require(!cfg.m_list.is_empty() && cfg.m_list.iter().all(|&m| m >= 2), "every m must be at least 2")?;
    require(cfg.reps >= 1 && cfg.batches >= 2 && cfg.mc_samples >= 2, "reps, batches and mc_samples too small")?;
    let root = base_stream(rng);

    let c = root.derive(0).gaussians(d * d);
    let sigma = SymMatrix::from_upper_fn(d, |i, j| {
        let s: f64 = (0..d).map(|k| c[i * d + k] * c[j * d + k]).sum();
        0.8 * 4.0 / d as f64 * s + if i == j { 0.2 } else { 0.0 }
    });
    let ident = SymMatrix::identity(d);
    let zeros = vec![0.0; d];
    let ones = vec![1.0; d];
    let specs: [(&[f64], &SymMatrix); 3] = [(&zeros, &ident), (&ones, &sigma), (&ones, &ident)];

    // ground truth: `batches` independent moment estimates per distribution
    let truth_stream = root.derive(1);
    let mut batch_moments: Vec<[GaussianMoments; 3]> = Vec::with_capacity(cfg.batches);
    for b in 0..cfg.batches {
        let mut s = truth_stream.derive(b as u64);
        let mut one = |k: usize| -> Result<GaussianMoments> {
            let (mu, cov) = specs[k];
            Ok(censored_normal_moments(mu, cov, &mut s, cfg.mc_samples)?.moments)
        };
        batch_moments.push([one(0)?, one(1)?, one(2)?]);
    }
    let mut true1 = Vec::new();
    let mut true2 = Vec::new();
    for bm in &batch_moments {
        true1.push(frechet_distance(&bm[0], &bm[2])?.value);
        true2.push(frechet_distance(&bm[1], &bm[2])?.value);
    }
    let (t1, _, se1) = mean_std_stderr(&true1);
    let (t2, _, se2) = mean_std_stderr(&true2);
    let pooled = |k: usize| -> Result<GaussianMoments> {
        let nb = cfg.batches as f64;
        let mean = (0..d)
            .map(|i| batch_moments.iter().map(|bm| bm[k].mean[i]).sum::<f64>() / nb)
            .collect();
        let cov = SymMatrix::from_upper_fn(d, |i, j| {
            batch_moments.iter().map(|bm| bm[k].cov.get(i, j)).sum::<f64>() / nb
        });
        GaussianMoments::new(mean, cov)
    };
    let q = pooled(2)?;

    let roots = [psd_sqrt(&ident)?, psd_sqrt(&sigma)?];
    let mut report = BiasReport::new("fid-reversal-relu")
        .param("d", d)
        .param("m_list", cfg.m_list.as_slice())
        .param("reps", cfg.reps)
        .param("mc_samples", cfg.mc_samples)
        .param("batches", cfg.batches);
    let est_stream = root.derive(2);
    for (k, &m) in cfg.m_list.iter().enumerate() {
        let s = est_stream.derive(k as u64);
        let mut means = [0.0; 2];
        for (p, label, truth) in [(0usize, "P1", t1), (1, "P2", t2)] {
            let values = run_reps(cfg.reps, &s.derive(p as u64), |r| -> Result<f64> {
                let x = sample_censored(specs[p].0, &roots[p], m, r)?;
                Ok(frechet_distance(&fit_moments(&x)?, &q)?.value)
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
            let row = BiasRow::from_values(m, label, &values, Some(truth));
            means[p] = row.mean;
            report.rows.push(row);
        }
        report.note(&format!("estimates_reversed_m{m}"), (means[0] < means[1]) != (t1 < t2));
    }
    report.note("true_fid_p1", t1);
    report.note("true_fid_p1_stderr", se1);
    report.note("true_fid_p2", t2);
    report.note("true_fid_p2_stderr", se2);
    report.note("true_order_p1_farther", t1 > t2);
    Ok(report.finish())
}
