//! Dense linear-algebra kernels.
//!
//! The factorizations here are backed by nalgebra's SVD. Everything the
//! protocols need reduces to three questions about a matrix `M`: which
//! directions carry its top singular values, what spans its row space, and how
//! much Frobenius mass lies beyond the top `k` directions.

mod io;
mod matrix;

pub use io::{read_binary, read_csv, write_binary, write_csv};
pub use matrix::DenseMatrix;

use thiserror::Error;

/// Orthonormality tolerance used throughout the crate.
pub const ORTHO_TOL: f64 = 1e-10;

/// Relative tolerance (against ‖M‖_F) below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("expected {expected} entries, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("empty input")]
    Empty,
    #[error("rank {k} exceeds min dimension {min_dim}")]
    RankTooLarge { k: usize, min_dim: usize },
    #[error("rank must be positive")]
    ZeroRank,
    #[error("matrix is all zero; row space basis is empty")]
    EmptyBasis,
    #[error("malformed matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Singular values (nonincreasing) with the matching right singular vectors as
/// the rows of `vt`. Only the `min(rows, cols)` leading triplets are returned.
#[derive(Debug, Clone)]
pub struct RightSvd {
    pub singular_values: Vec<f64>,
    pub vt: DenseMatrix,
}

pub fn right_svd(m: &DenseMatrix) -> RightSvd {
    let (rows, cols) = m.shape();
    let min_dim = rows.min(cols);
    if min_dim == 0 {
        return RightSvd {
            singular_values: Vec::new(),
            vt: DenseMatrix::zeros(0, cols),
        };
    }
    let svd = m.to_nalgebra().svd(false, true);
    let vt = svd.v_t.expect("requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values = order.iter().map(|&i| svd.singular_values[i].max(0.0)).collect();
    let vt = DenseMatrix::from_fn(order.len(), cols, |r, c| vt[(order[r], c)]);
    RightSvd { singular_values, vt }
}

pub fn singular_values(m: &DenseMatrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    if rows.min(cols) == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.to_nalgebra().singular_values().iter().map(|v| v.max(0.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Flips `v` so that its first entry of largest magnitude is nonnegative.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    let mut best_abs = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top-`k` right singular vectors of `m` as the orthonormal columns of a
/// `cols(m) × k` matrix, ordered by nonincreasing singular value.
pub fn top_right_singular_vectors(m: &DenseMatrix, k: usize) -> Result<DenseMatrix, LinalgError> {
    if k == 0 {
        return Err(LinalgError::ZeroRank);
    }
    let min_dim = m.rows().min(m.cols());
    if k > min_dim {
        return Err(LinalgError::RankTooLarge { k, min_dim });
    }
    let svd = right_svd(m);
    let mut v = DenseMatrix::zeros(m.cols(), k);
    for c in 0..k {
        let mut col = svd.vt.row(c).to_vec();
        canonical_sign(&mut col);
        for (r, x) in col.into_iter().enumerate() {
            v.set(r, c, x);
        }
    }
    Ok(v)
}

/// Orthonormal basis for the row space of `m`, one basis vector per row.
///
/// The numerical rank counts singular values above `RANK_TOL · ‖m‖_F`.
pub fn orthonormal_row_basis(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let norm = m.frobenius_norm();
    if norm == 0.0 {
        return Err(LinalgError::EmptyBasis);
    }
    let svd = right_svd(m);
    let rank = svd.singular_values.iter().take_while(|s| **s > RANK_TOL * norm).count();
    let mut basis = DenseMatrix::zeros(rank, m.cols());
    for r in 0..rank {
        let mut row = svd.vt.row(r).to_vec();
        canonical_sign(&mut row);
        basis.row_mut(r).copy_from_slice(&row);
    }
    Ok(basis)
}

/// `f_k(M)`: Frobenius distance from `m` to the nearest matrix of rank ≤ `k`.
pub fn best_rank_k_error(m: &DenseMatrix, k: usize) -> Result<f64, LinalgError> {
    let min_dim = m.rows().min(m.cols());
    if k > min_dim {
        return Err(LinalgError::RankTooLarge { k, min_dim });
    }
    let sv = singular_values(m);
    Ok(sv.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt())
}

/// Number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DenseMatrix, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    let Some(top) = sv.first().copied() else {
        return 0;
    };
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * top).count()
}

/// Largest deviation of `QᵀQ` from the identity, for `Q` with orthonormal columns.
pub fn column_orthonormality_error(q: &DenseMatrix) -> f64 {
    let gram = q.t_matmul(q).expect("square gram");
    gram.max_abs_diff(&DenseMatrix::identity(q.cols()))
}
