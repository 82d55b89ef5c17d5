//! Distributed rank-`k` approximation of `A = A¹ + … + Aˢ` (AdaptiveCompress).
//!
//! The coordinator first sketches `A` with a sign matrix `S` of `⌈4k/ε⌉`
//! rows and broadcasts an orthonormal basis `U` of the row space of `SA`.
//! It then embeds the narrow matrix `AU` with a second sign matrix `P` and
//! broadcasts the top-`k` right singular vectors `V` of `PAU`. Server `t` ends
//! up holding `AᵗU`, `U` and `V`, which define its share
//! `Cᵗ = AᵗU·V·Vᵀ·Uᵀ`. The `n × d` matrix `C = ΣCᵗ` is never formed by the
//! protocol.

mod protocol;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commsim::{CommLedger, FabricError, Schedule};
use crate::linalg::{self, DenseMatrix, LinalgError};
use crate::sketch::SketchError;

pub use protocol::adaptive_compress;

#[derive(Debug, Error)]
pub enum LowRankError {
    #[error("rank k={k} must satisfy 1 ≤ k ≤ min(n, d) = {min_dim}")]
    InvalidRank { k: usize, min_dim: usize },
    #[error("ε={0} must lie in (0, 1]")]
    InvalidEpsilon(f64),
    #[error("partition needs at least one block")]
    NoBlocks,
    #[error("block {index} is {actual:?}, expected {expected:?}")]
    BlockShape {
        index: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("factors do not match the input: {0}")]
    FactorMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// `A = Σ_t blocks[t]`, one `n × d` block per server.
#[derive(Debug, Clone)]
pub struct PartitionedMatrix {
    n: usize,
    d: usize,
    blocks: Vec<DenseMatrix>,
}

impl PartitionedMatrix {
    pub fn new(blocks: Vec<DenseMatrix>) -> Result<Self, LowRankError> {
        let first = blocks.first().ok_or(LowRankError::NoBlocks)?;
        let expected = first.shape();
        for (index, b) in blocks.iter().enumerate() {
            if b.shape() != expected {
                return Err(LowRankError::BlockShape {
                    index,
                    expected,
                    actual: b.shape(),
                });
            }
        }
        Ok(Self {
            n: expected.0,
            d: expected.1,
            blocks,
        })
    }

    pub fn servers(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn blocks(&self) -> &[DenseMatrix] {
        &self.blocks
    }

    /// The global matrix. Only oracles and tests should need this.
    pub fn materialize(&self) -> DenseMatrix {
        DenseMatrix::sum(self.blocks.iter()).expect("blocks share a shape")
    }
}

/// Sketch sizes and independence degrees. Defaults follow the protocol's
/// `m_S = ⌈4k/ε⌉` and `m_P = ⌈4·m_S/ε²⌉`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LowRankConfig {
    pub sketch_factor: f64,
    pub embedding_factor: f64,
    /// Independence of `S`; `None` means `k + 4`.
    pub sketch_independence: Option<usize>,
    /// Independence of `P`; `None` means `k + 4`.
    pub embedding_independence: Option<usize>,
    /// Ship `SA` and `PAᵗ(SA)ᵀ` instead of `U`, `PAᵗU` and `V`.
    pub bit_bounded: bool,
    #[serde(skip)]
    pub schedule: Schedule,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        Self {
            sketch_factor: 4.0,
            embedding_factor: 4.0,
            sketch_independence: None,
            embedding_independence: None,
            bit_bounded: false,
            schedule: Schedule::Parallel,
        }
    }
}

impl LowRankConfig {
    pub fn sketch_rows(&self, k: usize, eps: f64) -> usize {
        (self.sketch_factor * k as f64 / eps).ceil().max(1.0) as usize
    }

    /// Rows of a subspace embedding for a matrix with `columns` columns.
    pub fn embedding_rows(&self, columns: usize, eps: f64) -> usize {
        (self.embedding_factor * columns as f64 / (eps * eps)).ceil().max(1.0) as usize
    }

    pub fn sketch_independence(&self, k: usize) -> usize {
        self.sketch_independence.unwrap_or(k + 4)
    }

    pub fn embedding_independence(&self, k: usize) -> usize {
        self.embedding_independence.unwrap_or(k + 4)
    }
}

/// Distributed representation of `C = Σ_t AᵗU·V·Vᵀ·Uᵀ`.
#[derive(Debug, Clone)]
pub struct LowRankFactors {
    /// `d × r`, orthonormal columns spanning the row space of `SA`.
    pub u: DenseMatrix,
    /// `r × k'`, orthonormal columns; `k' = min(k, r)`.
    pub v: DenseMatrix,
    /// `AᵗU` for each server, `n × r`.
    pub projected: Vec<DenseMatrix>,
}

impl LowRankFactors {
    pub fn rank_bound(&self) -> usize {
        self.v.cols()
    }

    /// `Cᵗ = AᵗU·V·Vᵀ·Uᵀ`, the share server `t` (1-based) outputs.
    pub fn server_share(&self, server: usize) -> Result<DenseMatrix, LowRankError> {
        let block = self
            .projected
            .get(server.wrapping_sub(1))
            .ok_or_else(|| LowRankError::FactorMismatch(format!("no server {server}")))?;
        self.lift(block)
    }

    /// `C`, built from the sum of the projected blocks.
    pub fn implied_matrix(&self) -> Result<DenseMatrix, LowRankError> {
        let au = DenseMatrix::sum(self.projected.iter())?;
        self.lift(&au)
    }

    fn lift(&self, projected: &DenseMatrix) -> Result<DenseMatrix, LowRankError> {
        let left = projected.matmul(&self.v)?;
        let right = self.u.matmul(&self.v)?.transpose();
        Ok(left.matmul(&right)?)
    }
}

/// Outcome of one AdaptiveCompress run.
#[derive(Debug, Clone)]
pub struct CompressRun {
    pub factors: LowRankFactors,
    pub ledger: CommLedger,
    pub sketch_rows: usize,
    pub embedding_rows: usize,
}

/// `‖ΣAᵗ − (ΣAᵗU)·V·Vᵀ·Uᵀ‖_F`, materialized.
pub fn implied_error(input: &PartitionedMatrix, factors: &LowRankFactors) -> Result<f64, LowRankError> {
    check_factors(input, factors)?;
    let a = input.materialize();
    let c = factors.implied_matrix()?;
    Ok(a.sub(&c)?.frobenius_norm())
}

/// The same error evaluated as `‖A − A·U·V·Vᵀ·Uᵀ‖_F` on a materialized `A`.
pub fn projection_error(a: &DenseMatrix, u: &DenseMatrix, v: &DenseMatrix) -> Result<f64, LowRankError> {
    let uv = u.matmul(v)?;
    let c = a.matmul(&uv)?.matmul(&uv.transpose())?;
    Ok(a.sub(&c)?.frobenius_norm())
}

fn check_factors(input: &PartitionedMatrix, f: &LowRankFactors) -> Result<(), LowRankError> {
    let r = f.u.cols();
    if f.u.rows() != input.d() {
        return Err(LowRankError::FactorMismatch(format!("U has {} rows, d = {}", f.u.rows(), input.d())));
    }
    if f.v.rows() != r {
        return Err(LowRankError::FactorMismatch(format!("V has {} rows, U has {r} columns", f.v.rows())));
    }
    if f.projected.len() != input.servers() {
        return Err(LowRankError::FactorMismatch(format!(
            "{} projected blocks for {} servers",
            f.projected.len(),
            input.servers()
        )));
    }
    if let Some(b) = f.projected.iter().find(|b| b.shape() != (input.n(), r)) {
        return Err(LowRankError::FactorMismatch(format!(
            "projected block is {:?}, expected {:?}",
            b.shape(),
            (input.n(), r)
        )));
    }
    Ok(())
}

/// Error, oracle and their ratio for one run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Quality {
    pub error: f64,
    pub fk_oracle: f64,
    pub ratio: f64,
}

/// Relative floor below which `f_k(A)` is treated as exactly zero.
pub const ZERO_ORACLE_TOL: f64 = 1e-9;
/// Relative error accepted as exact capture when `f_k(A)` is zero.
pub const EXACT_CAPTURE_TOL: f64 = 1e-6;

/// `error / f_k(A)`. When `f_k(A)` vanishes the ratio is `1` for exact capture
/// (error within `EXACT_CAPTURE_TOL·‖A‖_F`) and `+∞` otherwise.
pub fn approximation_ratio(error: f64, fk_oracle: f64, norm: f64) -> f64 {
    if fk_oracle > ZERO_ORACLE_TOL * norm {
        error / fk_oracle
    } else if error <= EXACT_CAPTURE_TOL * norm {
        1.0
    } else {
        f64::INFINITY
    }
}

/// Materializes `A` and compares the run against `f_k(A)`.
pub fn evaluate(input: &PartitionedMatrix, factors: &LowRankFactors, k: usize) -> Result<Quality, LowRankError> {
    check_factors(input, factors)?;
    let a = input.materialize();
    let error = a.sub(&factors.implied_matrix()?)?.frobenius_norm();
    let fk_oracle = linalg::best_rank_k_error(&a, k)?;
    Ok(Quality {
        error,
        fk_oracle,
        ratio: approximation_ratio(error, fk_oracle, a.frobenius_norm()),
    })
}

pub(crate) fn validate(input: &PartitionedMatrix, k: usize, eps: f64) -> Result<(), LowRankError> {
    let min_dim = input.n().min(input.d());
    if k == 0 || k > min_dim {
        return Err(LowRankError::InvalidRank { k, min_dim });
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(LowRankError::InvalidEpsilon(eps));
    }
    Ok(())
}
