//! Feature files: the `FMAT` binary layout and headerless CSV.
//!
//! Binary layout, all little-endian: magic `FMAT`, `u32` version (1),
//! `u64` rows, `u64` cols, then `rows * cols` `f64` values row-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use discrepancy::FeatureMatrix;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.fmat` / `.bin` are binary, `.csv` is CSV, anything else is
    /// decided by sniffing the magic bytes when reading.
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "fmat" | "bin" => Some(Self::Binary),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes (expected \"FMAT\")")]
    Magic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: truncated: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },
    #[error("{path}: {extra} trailing bytes after the payload")]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFinite { path: PathBuf, row: usize, col: usize },
    #[error("{path}: line {line} has {found} fields, expected {expected}")]
    Ragged {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: line {line}, field {field}: cannot parse {text:?} as a number")]
    Parse {
        path: PathBuf,
        line: usize,
        field: usize,
        text: String,
    },
    #[error("{path}: no data rows")]
    Empty { path: PathBuf },
}

impl LoadError {
    /// Stable short code, printed with the message.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Magic { .. } => "bad-magic",
            Self::Version { .. } => "bad-version",
            Self::Truncated { .. } => "truncated",
            Self::TrailingBytes { .. } => "trailing-bytes",
            Self::NonFinite { .. } => "non-finite",
            Self::Ragged { .. } => "ragged",
            Self::Parse { .. } => "parse",
            Self::Empty { .. } => "empty",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LoadError + '_ {
    move |source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_features(path: &Path, format: Option<Format>) -> Result<FeatureMatrix, LoadError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let format = format
        .or_else(|| Format::from_extension(path))
        .unwrap_or(if bytes.starts_with(MAGIC) { Format::Binary } else { Format::Csv });
    match format {
        Format::Binary => decode_binary(path, &bytes),
        Format::Csv => decode_csv(path, &bytes),
    }
}

fn non_finite_check(path: &Path, cols: usize, data: &[f64]) -> Result<(), LoadError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(LoadError::NonFinite {
            path: path.to_path_buf(),
            row: k / cols,
            col: k % cols,
        }),
        None => Ok(()),
    }
}

fn build(path: &Path, rows: usize, cols: usize, data: Vec<f64>) -> Result<FeatureMatrix, LoadError> {
    if rows == 0 || cols == 0 {
        return Err(LoadError::Empty { path: path.to_path_buf() });
    }
    non_finite_check(path, cols, &data)?;
    FeatureMatrix::new(rows, cols, data).map_err(|e| LoadError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
    })
}

fn decode_binary(path: &Path, bytes: &[u8]) -> Result<FeatureMatrix, LoadError> {
    let p = || path.to_path_buf();
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(LoadError::Magic { path: p() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(LoadError::Truncated {
            path: p(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(LoadError::Version { path: p(), version });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .unwrap_or(u64::MAX);
    let found = bytes.len() as u64;
    if found < expected {
        return Err(LoadError::Truncated {
            path: p(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(LoadError::TrailingBytes {
            path: p(),
            extra: found - expected,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    build(path, rows as usize, cols as usize, data)
}

fn decode_csv(path: &Path, bytes: &[u8]) -> Result<FeatureMatrix, LoadError> {
    let text = std::str::from_utf8(bytes).map_err(|e| LoadError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    let mut data = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let start = data.len();
        for (f, field) in line.split(',').enumerate() {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| LoadError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                field: f + 1,
                text: field.to_string(),
            })?;
            data.push(v);
        }
        let found = data.len() - start;
        if rows == 0 {
            cols = found;
        } else if found != cols {
            return Err(LoadError::Ragged {
                path: path.to_path_buf(),
                line: k + 1,
                expected: cols,
                found,
            });
        }
        rows += 1;
    }
    build(path, rows, cols, data)
}

pub fn encode_binary(x: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * x.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(x.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u64).to_le_bytes());
    for v in x.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn encode_csv(x: &FeatureMatrix) -> String {
    let mut out = String::new();
    for row in x.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| format_value(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn save_features(path: &Path, x: &FeatureMatrix, format: Format) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    match format {
        Format::Binary => f.write_all(&encode_binary(x)),
        Format::Csv => f.write_all(encode_csv(x).as_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, bytes: &[u8]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        (dir, p)
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let x = FeatureMatrix::from_rows(&[[0.1, -2.5e-300], [f64::MAX, 1.0 / 3.0], [-0.0, 7.0]]).unwrap();
        let (_d, p) = tmp("a.fmat", &encode_binary(&x));
        let back = load_features(&p, None).unwrap();
        let bits = |m: &FeatureMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!((back.rows(), back.cols()), (3, 2));
        assert_eq!(bits(&back), bits(&x));
    }

    #[test]
    fn csv_parses_fixture() {
        let (_d, p) = tmp("a.csv", b"1.5,2.0\n3.0,4.0\n");
        let x = load_features(&p, None).unwrap();
        assert_eq!(x.as_slice(), &[1.5, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let x = FeatureMatrix::from_rows(&[[0.1, 1e-300, 123456789.123], [-1e20, 2.0f64.sqrt(), 0.0]]).unwrap();
        let (_d, p) = tmp("a.csv", encode_csv(&x).as_bytes());
        assert_eq!(load_features(&p, None).unwrap(), x);
    }

    #[test]
    fn distinct_load_errors() {
        let x = FeatureMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let good = encode_binary(&x);

        let (_d, p) = tmp("t.fmat", &good[..good.len() - 8]);
        assert_eq!(load_features(&p, None).unwrap_err().code(), "truncated");

        let mut bad = good.clone();
        bad[0] = b'X';
        let (_d, p) = tmp("m.fmat", &bad);
        assert_eq!(load_features(&p, None).unwrap_err().code(), "bad-magic");

        let mut nan = good.clone();
        nan[24..32].copy_from_slice(&f64::NAN.to_le_bytes());
        let (_d, p) = tmp("n.fmat", &nan);
        assert_eq!(load_features(&p, None).unwrap_err().code(), "non-finite");

        let (_d, p) = tmp("r.csv", b"1,2\n3\n");
        assert_eq!(load_features(&p, None).unwrap_err().code(), "ragged");

        let (_d, p) = tmp("n.csv", b"1,NaN\n");
        assert_eq!(load_features(&p, None).unwrap_err().code(), "non-finite");

        let (_d, p) = tmp("x.csv", b"1,abc\n");
        assert_eq!(load_features(&p, None).unwrap_err().code(), "parse");

        let mut long = good.clone();
        long.push(0);
        let (_d, p) = tmp("l.fmat", &long);
        assert_eq!(load_features(&p, None).unwrap_err().code(), "trailing-bytes");
    }

    #[test]
    fn unknown_extension_is_sniffed() {
        let x = FeatureMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let (_d, p) = tmp("a.dat", &encode_binary(&x));
        assert_eq!(load_features(&p, None).unwrap(), x);
        let (_d, p) = tmp("b.dat", b"1,2\n");
        assert_eq!(load_features(&p, None).unwrap(), x);
    }
}
