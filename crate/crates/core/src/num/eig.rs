use crate::error::{Error, Result};
use crate::num::SymMatrix;

/// Sweep cap for the cyclic Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// Eigenvalues (descending) and the matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Row-major `dim x dim`; column `j` is the eigenvector of `values[j]`.
    pub vectors: Vec<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, j: usize) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| self.vectors[i * n + j]).collect()
    }

    /// `V diag(f(lambda)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        SymMatrix::from_upper_fn(n, |i, j| {
            let (ri, rj) = (&v[i * n..(i + 1) * n], &v[j * n..(j + 1) * n]);
            ri.iter()
                .zip(rj)
                .zip(&mapped)
                .map(|((a, b), l)| a * l * b)
                .sum()
        })
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Each sweep visits every `(p, q)` pair above the diagonal once and applies
/// the plane rotation that annihilates `a[p][q]`. Iteration stops when the
/// off-diagonal Frobenius norm falls to machine precision relative to
/// `||A||_F`, or when a whole sweep finds nothing worth rotating.
pub fn sym_eig(a: &SymMatrix) -> Result<SymEigen> {
    let n = a.dim();
    let mut m = a.as_slice().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = a.frobenius_norm();
    let target = f64::EPSILON * norm;

    let mut converged = n <= 1;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let off = off_diagonal_norm(&m, n);
        if off <= target {
            converged = true;
            break;
        }
        let mut rotations = 0usize;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[p * n + q];
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                if apq.abs() <= 0.5 * f64::EPSILON * (app.abs() + aqq.abs())
                    || apq.abs() < f64::MIN_POSITIVE
                {
                    continue;
                }
                rotations += 1;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut m, n, p, q, c, s);
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                // columns of V
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        if rotations == 0 {
            converged = true;
        }
    }
    if !converged && off_diagonal_norm(&m, n) > target {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + new_col] = v[k * n + old_col];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// `A <- J^T A J` for the rotation acting on coordinates `p`, `q`.
fn rotate(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let akp = m[k * n + p];
        let akq = m[k * n + q];
        m[k * n + p] = c * akp - s * akq;
        m[k * n + q] = s * akp + c * akq;
    }
    let (row_p, row_q) = if p < q {
        let (lo, hi) = m.split_at_mut(q * n);
        (&mut lo[p * n..(p + 1) * n], &mut hi[..n])
    } else {
        unreachable!("p < q by construction")
    };
    for (apk, aqk) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let (x, y) = (*apk, *aqk);
        *apk = c * x - s * y;
        *aqk = s * x + c * y;
    }
}

fn off_diagonal_norm(m: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += 2.0 * m[i * n + j] * m[i * n + j];
        }
    }
    s.sqrt()
}

/// Tolerance below zero tolerated for eigenvalues of a PSD matrix.
pub fn psd_tolerance(a: &SymMatrix) -> f64 {
    1e-10 * a.frobenius_norm()
}

/// Symmetric PSD square root `S` with `S S = A`.
///
/// Eigenvalues in `[-tol, 0)` with `tol = 1e-10 ||A||_F` are treated as
/// round-off and clamped to zero; anything more negative is rejected.
pub fn psd_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    let tol = psd_tolerance(a);
    if let Some(&min) = eig.values.last() {
        if min < -tol {
            return Err(Error::NotPsd {
                eigenvalue: min,
                tolerance: tol,
            });
        }
    }
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}
