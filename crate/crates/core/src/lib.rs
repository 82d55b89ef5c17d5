//! Communication-metered distributed protocols for low-rank approximation and
//! for estimating sums of a function over aggregated nonnegative vectors.
//!
//! Data is split across `s` servers that talk only to a coordinator. The
//! [`commsim`] fabric runs every protocol in rounds and counts the words on
//! every edge. Accuracy is checked against exact oracles computed from the
//! materialized inputs.

pub mod commsim;
pub mod instance;
pub mod linalg;
pub mod lowrank;
pub mod moments;
pub mod sketch;

pub use commsim::{CommLedger, LedgerSummary};
pub use linalg::DenseMatrix;
pub use sketch::SketchSeed;
