//! Relative similarity test between two candidate samples and a reference,
//! and the learning-rate controller driven by its p-values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram_matrix, kernel_matrix, KernelMatrix, KernelSpec};
use crate::num::{std_normal_cdf, FeatureMatrix, RngState};

/// Minimum rows per sample after truncation.
pub const MIN_ROWS: usize = 10;

/// How the variance of `t_candidate - t_baseline` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    /// `(4/n)` times the sample variance of the row projections of the
    /// difference kernel. Ignores the second-order term, which dominates
    /// when both candidates are equally close to the reference.
    Projection,
    /// Unbiased estimate of the full U-statistic variance, first- and
    /// second-order terms.
    #[default]
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `MMD_u^2(candidate, reference) - MMD_u^2(baseline, reference)`.
    pub statistic: f64,
    pub variance: f64,
    /// `Phi(statistic / sqrt(variance))`; small values favour the candidate.
    pub p_value: f64,
    pub n_used: usize,
    pub mmd_candidate: f64,
    pub mmd_baseline: f64,
    pub variance_method: VarianceMethod,
}

/// Tests whether the candidate sample is closer to the reference than the
/// baseline sample is.
///
/// All three samples are truncated to the smallest row count after a seeded
/// shuffle. Candidate and baseline share the shuffle stream, so passing the
/// same matrix twice gives a statistic of exactly zero and swapping them
/// negates it.
pub fn relative_similarity_test(
    spec: &KernelSpec,
    candidate: &FeatureMatrix,
    baseline: &FeatureMatrix,
    reference: &FeatureMatrix,
    rng: &mut RngState,
    method: VarianceMethod,
) -> Result<TestResult> {
    spec.validate()?;
    candidate.ensure_same_cols(baseline)?;
    candidate.ensure_same_cols(reference)?;
    for z in [candidate, baseline, reference] {
        z.ensure_rows(MIN_ROWS)?;
    }
    let n = candidate.rows().min(baseline.rows()).min(reference.rows());
    let base = RngState::new(rng.next_u64(), rng.stream());
    let shuffle = |z: &FeatureMatrix, stream: u64| {
        let idx = base.derive(stream).sample_without_replacement(z.rows(), n);
        z.select_rows(&idx)
    };
    let c = shuffle(candidate, 0);
    let b = shuffle(baseline, 0);
    let z = shuffle(reference, 1);

    let kcc = gram_matrix(spec, &c)?;
    let kbb = gram_matrix(spec, &b)?;
    let kzz = gram_matrix(spec, &z)?;
    let kcz = kernel_matrix(spec, &c, &z)?;
    let kbz = kernel_matrix(spec, &b, &z)?;

    let within_zz = off_diagonal_sum(&kzz);
    let t_c = u_statistic(off_diagonal_sum(&kcc), within_zz, full_sum(&kcz), n);
    let t_b = u_statistic(off_diagonal_sum(&kbb), within_zz, full_sum(&kbz), n);
    let statistic = t_c - t_b;

    let d = difference_kernel(&kcc, &kbb, &kcz, &kbz, n);
    let raw = match method {
        VarianceMethod::Projection => projection_variance(&d, n),
        VarianceMethod::Complete => complete_variance(&d, n),
    };
    let floor = 1e-12 * (t_c.abs() + t_b.abs() + 1e-30).powi(2);
    let variance = raw.max(floor);
    let p_value = std_normal_cdf(statistic / variance.sqrt());
    Ok(TestResult {
        statistic,
        variance,
        p_value,
        n_used: n,
        mmd_candidate: t_c,
        mmd_baseline: t_b,
        variance_method: method,
    })
}

fn off_diagonal_sum(k: &KernelMatrix) -> f64 {
    let n = k.rows;
    let mut s = 0.0;
    for i in 0..n {
        s += k.row(i)[i + 1..].iter().sum::<f64>();
    }
    2.0 * s
}

fn full_sum(k: &KernelMatrix) -> f64 {
    (0..k.rows).map(|i| k.row(i).iter().sum::<f64>()).sum()
}

fn u_statistic(within_a: f64, within_z: f64, cross: f64, n: usize) -> f64 {
    let nf = n as f64;
    let pairs = nf * (nf - 1.0);
    within_a / pairs + within_z / pairs - 2.0 * cross / (nf * nf)
}

/// `h_c(i, j) - h_b(i, j)` for `i != j` (zero diagonal). The reference
/// Gram terms cancel.
fn difference_kernel(kcc: &KernelMatrix, kbb: &KernelMatrix, kcz: &KernelMatrix, kbz: &KernelMatrix, n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = kcc.get(i, j) - kbb.get(i, j) - kcz.get(i, j) - kcz.get(j, i)
                + kbz.get(i, j)
                + kbz.get(j, i);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn projection_variance(d: &[f64], n: usize) -> f64 {
    let proj: Vec<f64> = (0..n)
        .map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / (n - 1) as f64)
        .collect();
    let mean = proj.iter().sum::<f64>() / n as f64;
    let s2 = proj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    4.0 * s2 / n as f64
}

/// `4(n-2)/(n(n-1)) zeta_1 + 2/(n(n-1)) zeta_2` with each moment replaced by
/// its unbiased estimate over distinct index tuples.
fn complete_variance(d: &[f64], n: usize) -> f64 {
    let nf = n as f64;
    let (mut s, mut t2, mut t3) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let r: f64 = row.iter().sum();
        let q: f64 = row.iter().map(|v| v * v).sum();
        s += r;
        t2 += q;
        t3 += r * r - q;
    }
    let p2 = nf * (nf - 1.0);
    let p3 = p2 * (nf - 2.0);
    let p4 = p3 * (nf - 3.0);
    let theta2 = (s * s - 2.0 * t2 - 4.0 * t3) / p4;
    let zeta1 = t3 / p3 - theta2;
    let zeta2 = t2 / p2 - theta2;
    4.0 * (nf - 2.0) / p2 * zeta1 + 2.0 / p2 * zeta2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// A step fails when its p-value is not below `alpha`.
    pub alpha: f64,
    /// Consecutive failures that trigger a decay.
    pub patience: u32,
    pub decay: f64,
    pub min_lr: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            patience: 3,
            decay: 0.5,
            min_lr: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationState {
    pub lr: f64,
    pub consecutive_failures: u32,
    pub config: AdaptationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Kept,
    Decayed,
}

impl AdaptationState {
    pub fn new(lr: f64, config: AdaptationConfig) -> Result<Self> {
        let c = &config;
        if !(c.alpha > 0.0 && c.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {}", c.alpha)));
        }
        if c.patience == 0 {
            return Err(Error::InvalidInput("patience must be positive".into()));
        }
        if !(c.decay > 0.0 && c.decay < 1.0) {
            return Err(Error::InvalidInput(format!("decay must lie in (0, 1), got {}", c.decay)));
        }
        if !(c.min_lr >= 0.0 && c.min_lr.is_finite()) {
            return Err(Error::InvalidInput(format!("min_lr must be non-negative, got {}", c.min_lr)));
        }
        if !(lr > 0.0 && lr.is_finite() && lr >= c.min_lr) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive and at least min_lr, got {lr}"
            )));
        }
        Ok(Self {
            lr,
            consecutive_failures: 0,
            config,
        })
    }
}

/// Feeds one p-value to the controller.
pub fn lr_controller_step(state: &AdaptationState, p_value: f64) -> Result<(AdaptationState, Action)> {
    if !(0.0..=1.0).contains(&p_value) {
        return Err(Error::InvalidInput(format!("p-value must lie in [0, 1], got {p_value}")));
    }
    let mut next = *state;
    if p_value < state.config.alpha {
        next.consecutive_failures = 0;
        return Ok((next, Action::Kept));
    }
    next.consecutive_failures += 1;
    if next.consecutive_failures >= state.config.patience {
        next.consecutive_failures = 0;
        next.lr = (state.lr * state.config.decay).max(state.config.min_lr);
        return Ok((next, Action::Decayed));
    }
    Ok((next, Action::Kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::mmd2_unbiased;
    use crate::kernels::DEFAULT_ALPHAS;
    use proptest::prelude::*;

    fn gauss(rng: &mut RngState, rows: usize, cols: usize, shift: f64) -> FeatureMatrix {
        let data = rng.gaussians(rows * cols).into_iter().map(|v| v + shift).collect();
        FeatureMatrix::new(rows, cols, data).unwrap()
    }

    fn rq() -> KernelSpec {
        KernelSpec::rq(&DEFAULT_ALPHAS).unwrap()
    }

    #[test]
    fn identical_candidates_give_half() {
        let mut rng = RngState::new(40, 0);
        let x = gauss(&mut rng, 30, 3, 0.0);
        let z = gauss(&mut rng, 30, 3, 0.0);
        for method in [VarianceMethod::Projection, VarianceMethod::Complete] {
            let r = relative_similarity_test(&rq(), &x, &x, &z, &mut rng, method).unwrap();
            assert_eq!(r.statistic, 0.0);
            assert_eq!(r.p_value, 0.5);
        }
    }

    #[test]
    fn swapping_is_antisymmetric_and_deterministic() {
        let mut rng = RngState::new(41, 0);
        let a = gauss(&mut rng, 40, 2, 0.0);
        let b = gauss(&mut rng, 35, 2, 0.3);
        let z = gauss(&mut rng, 50, 2, 0.0);
        let run = |c: &FeatureMatrix, d: &FeatureMatrix| {
            relative_similarity_test(&rq(), c, d, &z, &mut RngState::new(3, 0), VarianceMethod::Complete).unwrap()
        };
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        assert_eq!(ab.statistic, -ba.statistic);
        assert!((ab.p_value - (1.0 - ba.p_value)).abs() <= 1e-12);
        assert_eq!(ab, run(&a, &b));
        assert_eq!(ab.n_used, 35);
    }

    #[test]
    fn statistic_parts_match_unbiased_mmd() {
        let mut rng = RngState::new(42, 0);
        let a = gauss(&mut rng, 25, 3, 0.0);
        let b = gauss(&mut rng, 25, 3, 0.5);
        let z = gauss(&mut rng, 25, 3, 0.0);
        let r = relative_similarity_test(&rq(), &a, &b, &z, &mut rng, VarianceMethod::Complete).unwrap();
        // equal sizes: the shuffle only permutes rows, which mmd2 ignores
        let ta = mmd2_unbiased(&rq(), &a, &z).unwrap().value;
        let tb = mmd2_unbiased(&rq(), &b, &z).unwrap().value;
        assert!((r.mmd_candidate - ta).abs() <= 1e-12);
        assert!((r.mmd_baseline - tb).abs() <= 1e-12);
        assert!((r.p_value - std_normal_cdf(r.statistic / r.variance.sqrt())).abs() == 0.0);
    }

    #[test]
    fn small_samples_rejected() {
        let mut rng = RngState::new(43, 0);
        let a = gauss(&mut rng, 9, 2, 0.0);
        let b = gauss(&mut rng, 20, 2, 0.0);
        let r = relative_similarity_test(&rq(), &a, &b, &b, &mut rng, VarianceMethod::Complete);
        assert!(matches!(r, Err(Error::InsufficientSamples { needed: 10, found: 9 })));
    }

    /// Brute-force oracle for the complete variance: explicit sums over
    /// distinct index tuples.
    #[test]
    fn complete_variance_matches_tuple_enumeration() {
        let n = 7;
        let mut rng = RngState::new(44, 0);
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.gaussian() + 0.3;
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        let (mut e2, mut c2) = (0.0, 0.0);
        let (mut e3, mut c3) = (0.0, 0.0);
        let (mut e4, mut c4) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                e2 += d[i * n + j].powi(2);
                c2 += 1.0;
                for k in 0..n {
                    if k == i || k == j {
                        continue;
                    }
                    e3 += d[i * n + j] * d[i * n + k];
                    c3 += 1.0;
                    for l in 0..n {
                        if l == i || l == j || l == k {
                            continue;
                        }
                        e4 += d[i * n + j] * d[k * n + l];
                        c4 += 1.0;
                    }
                }
            }
        }
        let nf = n as f64;
        let theta2 = e4 / c4;
        let oracle = 4.0 * (nf - 2.0) / (nf * (nf - 1.0)) * (e3 / c3 - theta2)
            + 2.0 / (nf * (nf - 1.0)) * (e2 / c2 - theta2);
        assert!((complete_variance(&d, n) - oracle).abs() <= 1e-12 * oracle.abs());
    }

    #[test]
    fn controller_scripted_sequences() {
        let cfg = AdaptationConfig::default();
        let run = |ps: &[f64]| {
            let mut s = AdaptationState::new(1e-4, cfg).unwrap();
            let mut actions = Vec::new();
            for &p in ps {
                let (next, a) = lr_controller_step(&s, p).unwrap();
                s = next;
                actions.push(a);
            }
            (s, actions)
        };
        let (s, a) = run(&[0.5, 0.5, 0.5]);
        assert_eq!(s.lr, 5e-5);
        assert_eq!(a, vec![Action::Kept, Action::Kept, Action::Decayed]);
        assert_eq!(s.consecutive_failures, 0);

        let (s, _) = run(&[0.5, 0.5, 0.01, 0.5, 0.5]);
        assert_eq!(s.lr, 1e-4);
        assert_eq!(s.consecutive_failures, 2);

        let mut s = AdaptationState::new(1e-4, cfg).unwrap();
        s.consecutive_failures = 2;
        let (s, a) = lr_controller_step(&s, 0.01).unwrap();
        assert_eq!((s.consecutive_failures, s.lr, a), (0, 1e-4, Action::Kept));

        // alpha itself counts as a failure
        let s = AdaptationState::new(1.0, cfg).unwrap();
        assert_eq!(lr_controller_step(&s, 0.05).unwrap().0.consecutive_failures, 1);
        assert!(lr_controller_step(&s, 1.5).is_err());
        assert!(lr_controller_step(&s, f64::NAN).is_err());
    }

    #[test]
    fn controller_validation() {
        let ok = AdaptationConfig::default();
        assert!(AdaptationState::new(0.0, ok).is_err());
        assert!(AdaptationState::new(1.0, AdaptationConfig { patience: 0, ..ok }).is_err());
        assert!(AdaptationState::new(1.0, AdaptationConfig { decay: 1.0, ..ok }).is_err());
        assert!(AdaptationState::new(1.0, AdaptationConfig { alpha: 0.0, ..ok }).is_err());
        assert!(AdaptationState::new(0.1, AdaptationConfig { min_lr: 0.2, ..ok }).is_err());
    }

    proptest! {
        #[test]
        fn controller_is_monotone_and_bounded(
            ps in prop::collection::vec(0.0f64..=1.0, 0..60),
            min_lr in 0.0f64..1e-3,
            patience in 1u32..5,
        ) {
            let cfg = AdaptationConfig { min_lr, patience, ..AdaptationConfig::default() };
            let mut s = AdaptationState::new(1e-2, cfg).unwrap();
            for p in ps {
                let (next, _) = lr_controller_step(&s, p).unwrap();
                prop_assert!(next.lr <= s.lr);
                prop_assert!(next.lr >= min_lr);
                prop_assert!(next.consecutive_failures < patience);
                s = next;
            }
        }
    }
}
