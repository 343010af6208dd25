use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `rows x cols` sample matrix, one sample per row, row-major.
///
/// Construction validates that both dimensions are positive and that every
/// entry is finite, so downstream estimators never see NaN or infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidInput("no rows".into()));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Single-column matrix from a slice of scalars.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Same matrix with `shift` added to every row.
    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: shift.len(),
            });
        }
        let data = self
            .data
            .chunks_exact(self.cols)
            .flat_map(|row| row.iter().zip(shift).map(|(a, b)| a + b))
            .collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub(crate) fn ensure_same_cols(&self, other: &Self) -> Result<()> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.cols,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_rows(&self, needed: usize) -> Result<()> {
        if self.rows < needed {
            return Err(Error::InsufficientSamples {
                needed,
                found: self.rows,
            });
        }
        Ok(())
    }

    /// Total order on matrices used to make two-argument reductions
    /// independent of argument order.
    pub(crate) fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.rows, self.cols)
            .cmp(&(other.rows, other.cols))
            .then_with(|| {
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    }
}

/// A real symmetric `dim x dim` matrix.
///
/// Stored in full, row-major; every constructor mirrors the upper triangle
/// onto the lower one so symmetry holds bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut m = Self::zeros(dim);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * dim + i] = d;
        }
        m
    }

    /// Builds the matrix from `f(i, j)` evaluated on the upper triangle only.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        Self { dim, data }
    }

    /// Takes the upper triangle of a full row-major matrix.
    pub fn from_upper(dim: usize, full: &[f64]) -> Result<Self> {
        if full.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: full.len(),
            });
        }
        if let Some(pos) = full.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self::from_upper_fn(dim, |i, j| full[i * dim + j]))
    }

    /// `(A + A^T) / 2` of a full row-major matrix.
    pub fn symmetrized(dim: usize, full: &[f64]) -> Result<Self> {
        if full.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: full.len(),
            });
        }
        let m = Self::from_upper_fn(dim, |i, j| 0.5 * (full[i * dim + j] + full[j * dim + i]));
        if let Some(pos) = m.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(m)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Writes `v` at `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// `a * self + b * other`, entrywise.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        Ok(Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    /// Full (generally non-symmetric) product `self * other`, row-major.
    pub fn matmul(&self, other: &Self) -> Vec<f64> {
        matmul(&self.data, &other.data, self.dim, self.dim, self.dim)
    }

    /// `self * other * self`, symmetric whenever `other` is.
    pub fn sandwich(&self, other: &Self) -> Self {
        let n = self.dim;
        let left = self.matmul(other);
        let full = matmul(&left, &self.data, n, n, n);
        Self::from_upper_fn(n, |i, j| 0.5 * (full[i * n + j] + full[j * n + i]))
    }

    /// `R * self * R^T` for a full row-major `R`.
    pub fn conjugated(&self, r: &[f64]) -> Self {
        let n = self.dim;
        let left = matmul(r, &self.data, n, n, n);
        let rt = transpose(r, n, n);
        let full = matmul(&left, &rt, n, n, n);
        Self::from_upper_fn(n, |i, j| 0.5 * (full[i * n + j] + full[j * n + i]))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.dim)
            .map(|row| dot(row, v))
            .collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Row-major `(r x k) * (k x c)` product.
pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for (l, &a_il) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            for (o, &b_lj) in out_row.iter_mut().zip(&b[l * c..(l + 1) * c]) {
                *o += a_il * b_lj;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(FeatureMatrix::new(0, 2, vec![]).is_err());
        assert!(FeatureMatrix::new(2, 0, vec![]).is_err());
        assert_eq!(
            FeatureMatrix::new(2, 2, vec![1.0, 2.0, f64::NAN, 3.0]),
            Err(Error::NonFinite { row: 1, col: 0 })
        );
        assert!(FeatureMatrix::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(FeatureMatrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(FeatureMatrix::from_rows(&rows).is_err());
    }

    #[test]
    fn symmetric_by_construction() {
        let full = [1.0, 2.0, 9.0, 4.0];
        let s = SymMatrix::from_upper(2, &full).unwrap();
        assert_eq!(s.get(1, 0), 2.0);
        assert_eq!(s.get(0, 1), 2.0);
        let mut s = SymMatrix::zeros(3);
        s.set(0, 2, 5.0);
        assert_eq!(s.get(2, 0), 5.0);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        // (2x3) * (3x2)
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
