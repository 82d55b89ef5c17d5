//! Sampling estimators for `A = Σ_i f(Σ_t a_ti)` over nonnegative data split
//! across servers.
//!
//! Notation shared by every estimator:
//! `C_t = Σ_i f(a_ti)`, `B_i = Σ_t f(a_ti)`, `A_i = f(Σ_t a_ti)`, `B = Σ_t C_t`,
//! `ρ_i = A_i / B_i`.

mod correlation;
mod frequency;
mod function;
mod sampling;
mod sum;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commsim::{CommLedger, FabricError, Schedule};

pub use correlation::{
    distinct_tuples, exact_generalized_moment, generalized_moment, rejection_sample_tuple, tuple_weight, GFunction,
    TupleData, TupleSample,
};
pub use frequency::{frequency_moments, lipschitz_moments, median_sum_estimate, FrequencyDiagnostics};
pub use function::{c_fs_power, lipschitz_ratio_bound, FunctionSpec};
pub use sampling::{multinomial, two_level_sample};
pub use sum::{distributed_sum, distributed_sum_domains, FiniteDomain, GeometricDomain, SampleableDomain};

#[derive(Debug, Error)]
pub enum MomentsError {
    #[error("server {server} holds a negative or non-finite entry at index {index}")]
    InvalidEntry { server: usize, index: usize },
    #[error("vectors have different lengths ({expected} vs {actual})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("at least one server is required")]
    NoServers,
    #[error("ε={0} must lie in (0, 1]")]
    InvalidEpsilon(f64),
    #[error("function `{0}` has no c_fs")]
    MissingCfs(String),
    #[error("function `{0}` has no Lipschitz exponent")]
    MissingLipschitz(String),
    #[error("function spec violated: {0}")]
    SpecViolation(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// Server `t` holds the nonnegative vector `vectors[t − 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedVectors {
    n: usize,
    vectors: Vec<Vec<f64>>,
}

impl PartitionedVectors {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self, MomentsError> {
        let n = vectors.first().ok_or(MomentsError::NoServers)?.len();
        for (t, v) in vectors.iter().enumerate() {
            if v.len() != n {
                return Err(MomentsError::LengthMismatch {
                    expected: n,
                    actual: v.len(),
                });
            }
            if let Some(index) = v.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(MomentsError::InvalidEntry { server: t + 1, index });
            }
        }
        Ok(Self { n, vectors })
    }

    pub fn servers(&self) -> usize {
        self.vectors.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// `Σ_t a_ti` for every `i`.
    pub fn aggregate(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for v in &self.vectors {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        out
    }
}

/// `C_t = Σ_i f(a_ti)` for one server's vector.
pub fn local_moment(a: &[f64], f: &FunctionSpec) -> Result<f64, MomentsError> {
    if let Some(index) = a.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(MomentsError::InvalidEntry { server: 0, index });
    }
    Ok(a.iter().map(|x| f.eval(*x)).sum())
}

/// `A = Σ_i f(Σ_t a_ti)` from the materialized aggregate.
pub fn exact_moment(input: &PartitionedVectors, f: &FunctionSpec) -> f64 {
    input.aggregate().into_iter().map(|x| f.eval(x)).sum()
}

/// Which phase produced a frequency-moment estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Zero input; nothing sampled.
    Empty,
    /// The coarse estimate satisfied `Ã ≥ sB`.
    Coarse,
    /// Bucketed estimate.
    Full,
}

/// Tunable constants. Every sample size is `⌈factor · (asymptotic size)⌉`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentConfig {
    /// `l = ⌈sum_factor · s · c_fs / ε²⌉`.
    pub sum_factor: f64,
    /// `m = ⌈coarse_factor · s^{L−2} / ε³⌉`.
    pub coarse_factor: f64,
    /// `|S| = ⌈sample_factor · s^{L−1} (ln s)² / ε³⌉`.
    pub sample_factor: f64,
    /// `|T_β| = min(|S|, ⌈subset_factor · β (ln s)² / ε³⌉)`.
    pub subset_factor: f64,
    /// `r = ⌈repetition_factor · (L ln s + ln(1/ε))⌉`.
    pub repetition_factor: f64,
    /// Upper filter edge `filter_factor · s · ln s · β`.
    pub filter_factor: f64,
    #[serde(skip)]
    pub schedule: Schedule,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            sum_factor: 100.0,
            coarse_factor: 1.0,
            sample_factor: 1.0,
            subset_factor: 1.0,
            repetition_factor: 4.0,
            filter_factor: 10.0,
            schedule: Schedule::Parallel,
        }
    }
}

/// `max(ln s, 1)`.
pub fn guarded_ln(s: usize) -> f64 {
    (s as f64).ln().max(1.0)
}

/// Result of one estimator run.
#[derive(Debug, Clone)]
pub struct MomentRun {
    pub estimate: f64,
    pub ledger: CommLedger,
    /// Only set by the frequency-moment engine.
    pub phase: Option<Phase>,
    /// Number of sampled indices (`l`, or `|S|` for the frequency engine).
    pub samples: usize,
}

pub(crate) fn check_eps(eps: f64) -> Result<(), MomentsError> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(MomentsError::InvalidEpsilon(eps))
    }
}
