//! Seeded random sign matrices with limited independence.
//!
//! A [`SketchSeed`] describes an `m × n` matrix whose entries are
//! `±1/√m`. Entry `(i, j)` is the parity of a degree-`(t−1)` polynomial over
//! GF(2⁶¹ − 1) evaluated at the flattened index `i·n + j`; a uniformly random
//! polynomial makes any `t` entries independent. Only the `t` coefficients
//! travel over the wire, and entries are regenerated on demand so the full
//! matrix is never stored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::DenseMatrix;

/// The Mersenne prime 2⁶¹ − 1.
pub const FIELD_PRIME: u64 = (1 << 61) - 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SketchError {
    #[error("sketch dimensions must be positive (rows={rows}, cols={cols}, t={t})")]
    InvalidDimension { rows: usize, cols: usize, t: usize },
    #[error("independence {t} must be below the field prime")]
    IndependenceTooLarge { t: u64 },
    #[error("{rows}x{cols} entries do not fit in the field")]
    IndexSpaceTooLarge { rows: usize, cols: usize },
    #[error("coefficient {value} is not a field element")]
    CoefficientOutOfRange { value: u64 },
    #[error("sketch has {sketch_cols} columns but matrix has {matrix_rows} rows")]
    DimensionMismatch { sketch_cols: usize, matrix_rows: usize },
    #[error("malformed seed bytes: {0}")]
    Malformed(&'static str),
}

#[inline]
fn reduce(x: u64) -> u64 {
    let x = if x >= FIELD_PRIME { x - FIELD_PRIME } else { x };
    if x >= FIELD_PRIME {
        x - FIELD_PRIME
    } else {
        x
    }
}

#[inline]
fn mul_mod(a: u64, b: u64) -> u64 {
    let prod = a as u128 * b as u128;
    let lo = (prod as u64) & FIELD_PRIME;
    let hi = (prod >> 61) as u64;
    reduce(lo + hi)
}

#[inline]
fn add_mod(a: u64, b: u64) -> u64 {
    reduce(a + b)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchSeed {
    rows: usize,
    cols: usize,
    coeffs: Vec<u64>,
}

impl SketchSeed {
    /// Draws a fresh polynomial of `independence` coefficients from `rng_state`.
    pub fn generate(rows: usize, cols: usize, independence: usize, rng_state: u64) -> Result<Self, SketchError> {
        Self::check_shape(rows, cols, independence)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_state);
        let coeffs = (0..independence).map(|_| rng.random_range(0..FIELD_PRIME)).collect();
        Ok(Self { rows, cols, coeffs })
    }

    /// Builds a seed from explicit coefficients, constant term first.
    pub fn from_coefficients(rows: usize, cols: usize, coeffs: Vec<u64>) -> Result<Self, SketchError> {
        Self::check_shape(rows, cols, coeffs.len())?;
        if let Some(&bad) = coeffs.iter().find(|c| **c >= FIELD_PRIME) {
            return Err(SketchError::CoefficientOutOfRange { value: bad });
        }
        Ok(Self { rows, cols, coeffs })
    }

    pub fn check_shape(rows: usize, cols: usize, t: usize) -> Result<(), SketchError> {
        if rows == 0 || cols == 0 || t == 0 {
            return Err(SketchError::InvalidDimension { rows, cols, t });
        }
        if t as u64 >= FIELD_PRIME {
            return Err(SketchError::IndependenceTooLarge { t: t as u64 });
        }
        match (rows as u64).checked_mul(cols as u64) {
            Some(n) if n <= FIELD_PRIME => Ok(()),
            _ => Err(SketchError::IndexSpaceTooLarge { rows, cols }),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn independence(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coefficients(&self) -> &[u64] {
        &self.coeffs
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.rows as f64).sqrt()
    }

    /// Words needed to ship this seed: four header fields plus `t` coefficients.
    pub fn words(&self) -> usize {
        self.coeffs.len() + 4
    }

    #[inline]
    fn hash(&self, x: u64) -> u64 {
        self.coeffs.iter().rev().fold(0u64, |acc, c| add_mod(mul_mod(acc, x), *c))
    }

    /// `true` for a `+scale` entry. Even field values map to `+`.
    #[inline]
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        assert!(
            i < self.rows && j < self.cols,
            "sketch index ({i}, {j}) outside {}x{}",
            self.rows,
            self.cols
        );
        self.hash((i * self.cols + j) as u64) & 1 == 0
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if self.is_positive(i, j) {
            self.scale()
        } else {
            -self.scale()
        }
    }

    /// Materializes the full matrix. Meant for tests and small inspections.
    pub fn expand(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| self.entry(i, j))
    }

    /// `S · m`, streaming over the rows of `m` without materializing `S`.
    pub fn apply_left(&self, m: &DenseMatrix) -> Result<DenseMatrix, SketchError> {
        if m.rows() != self.cols {
            return Err(SketchError::DimensionMismatch {
                sketch_cols: self.cols,
                matrix_rows: m.rows(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, m.cols());
        for r in 0..m.rows() {
            let src = m.row(r);
            if src.iter().all(|v| *v == 0.0) {
                continue;
            }
            for i in 0..self.rows {
                let dst = out.row_mut(i);
                if self.is_positive(i, r) {
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                } else {
                    dst.iter_mut().zip(src).for_each(|(o, v)| *o -= v);
                }
            }
        }
        Ok(out.scaled(self.scale()))
    }

    /// Little-endian `rows, cols, t, prime`, then the `t` coefficients.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.words());
        for field in [self.rows as u64, self.cols as u64, self.coeffs.len() as u64, FIELD_PRIME] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for c in &self.coeffs {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SketchError> {
        if bytes.len() < 32 || bytes.len() % 8 != 0 {
            return Err(SketchError::Malformed("length is not 8·(t+4)"));
        }
        let words: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (rows, cols, t, prime) = (words[0], words[1], words[2], words[3]);
        if prime != FIELD_PRIME {
            return Err(SketchError::Malformed("unsupported field prime"));
        }
        if words.len() as u64 != t + 4 {
            return Err(SketchError::Malformed("coefficient count does not match t"));
        }
        Self::from_coefficients(rows as usize, cols as usize, words[4..].to_vec())
    }
}
