//! Generalized correlations `M(f, g, k) = Σ_j f(Σ_t a_tj)` over distinct
//! ordered `k`-tuples `j`, where `a_tj = Σ_{i∈W_t} g(v_{i,j_1}, …, v_{i,j_k})`.

use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use super::sum::{run_sum, DrawLaw, SumSource};
use super::{FunctionSpec, MomentConfig, MomentRun, MomentsError};
use crate::linalg::DenseMatrix;

/// The per-row score `g` applied to the `k` selected coordinates.
#[derive(Clone)]
pub enum GFunction {
    Product,
    Sum,
    Min,
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for GFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GFunction::Product => "Product",
            GFunction::Sum => "Sum",
            GFunction::Min => "Min",
            GFunction::Custom(_) => "Custom",
        })
    }
}

impl GFunction {
    pub fn eval(&self, xs: &[f64]) -> f64 {
        match self {
            GFunction::Product => xs.iter().product(),
            GFunction::Sum => xs.iter().sum(),
            GFunction::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
            GFunction::Custom(g) => g(xs),
        }
    }
}

/// Server `t`'s rows `v_i`, `i ∈ W_t`, one per matrix row.
pub type TupleData = DenseMatrix;

/// All distinct ordered `k`-tuples of `0..n` in lexicographic order.
pub fn distinct_tuples(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = if k == 0 || k > n { 0 } else { (n - k + 1..=n).product::<usize>() };
    let mut current: Option<Vec<usize>> = if total > 0 { Some((0..k).collect()) } else { None };
    std::iter::from_fn(move || {
        let out = current.clone()?;
        current = next_distinct(&out, n);
        Some(out)
    })
}

fn next_distinct(tuple: &[usize], n: usize) -> Option<Vec<usize>> {
    let mut t = tuple.to_vec();
    let k = t.len();
    let mut pos = k;
    while pos > 0 {
        pos -= 1;
        let mut candidate = t[pos] + 1;
        while candidate < n && t[..pos].contains(&candidate) {
            candidate += 1;
        }
        if candidate < n {
            t[pos] = candidate;
            // Fill the tail with the smallest unused values.
            let mut next = 0;
            for slot in pos + 1..k {
                while t[..slot].contains(&next) {
                    next += 1;
                }
                t[slot] = next;
                next += 1;
            }
            return Some(t);
        }
    }
    None
}

fn encode(tuple: &[usize], n: usize) -> u64 {
    tuple.iter().fold(0u64, |acc, &j| acc * n as u64 + j as u64)
}

fn decode(mut code: u64, n: usize, k: usize) -> Vec<usize> {
    let mut out = vec![0; k];
    for slot in out.iter_mut().rev() {
        *slot = (code % n as u64) as usize;
        code /= n as u64;
    }
    out
}

/// `a_tj = Σ_i g(v_{i,j_1}, …, v_{i,j_k})` over the rows of `w`.
pub fn tuple_weight(w: &TupleData, g: &GFunction, tuple: &[usize]) -> f64 {
    let mut buf = vec![0.0; tuple.len()];
    (0..w.rows())
        .map(|i| {
            let row = w.row(i);
            for (b, &j) in buf.iter_mut().zip(tuple) {
                *b = row[j];
            }
            g.eval(&buf)
        })
        .sum()
}

/// The held sample of one streaming pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleSample {
    pub tuple: Vec<usize>,
    /// `Σ_j f(a_tj)` over all tuples.
    pub local_mass: f64,
    /// `f(a_tj)` of the held tuple.
    pub weight: f64,
}

/// One pass over weighted items keeping a single sample: item `j` replaces
/// the held one when `coin(w_j, T_j)` is true, where `T_j` is the running
/// total including `w_j`. With `coin` true at rate `w_j / T_j`, the held item
/// is `j` with probability `w_j / T`. Returns `(item, weight, total)`.
pub fn reservoir_select<I, C>(items: I, mut coin: C) -> Option<(u64, f64, f64)>
where
    I: IntoIterator<Item = (u64, f64)>,
    C: FnMut(f64, f64) -> bool,
{
    let mut total = 0.0;
    let mut held = None;
    for (item, w) in items {
        if w <= 0.0 {
            continue;
        }
        total += w;
        if coin(w, total) {
            held = Some((item, w));
        }
    }
    held.map(|(item, w)| (item, w, total))
}

/// Streams all distinct `k`-tuples once and returns a tuple drawn with
/// probability `f(a_tj) / Σ_j f(a_tj)`; `None` when that mass is zero.
pub fn rejection_sample_tuple(
    w: &TupleData,
    f: &FunctionSpec,
    g: &GFunction,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<TupleSample> {
    let n = w.cols();
    let items = distinct_tuples(n, k).map(|t| (encode(&t, n), f.eval(tuple_weight(w, g, &t))));
    let (code, weight, local_mass) = reservoir_select(items, |wj, total| rng.random_bool((wj / total).min(1.0)))?;
    Some(TupleSample {
        tuple: decode(code, n, k),
        local_mass,
        weight,
    })
}

/// `count` independent single-sample reservoirs run in one pass. At each
/// item the number of replaced holders is binomial and the replaced
/// holders are a uniform subset, which is the joint law of `count`
/// independent coins.
fn reservoir_many(w: &TupleData, f: &FunctionSpec, g: &GFunction, k: usize, count: u64, rng: &mut ChaCha8Rng) -> Vec<(u64, u64)> {
    let n = w.cols();
    let mut holders: Vec<Option<u64>> = vec![None; count as usize];
    let mut total = 0.0;
    for t in distinct_tuples(n, k) {
        let wj = f.eval(tuple_weight(w, g, &t));
        if wj <= 0.0 {
            continue;
        }
        total += wj;
        let p = (wj / total).min(1.0);
        let replaced = if p >= 1.0 {
            count
        } else {
            Binomial::new(count, p).expect("p in [0, 1]").sample(rng)
        };
        let code = encode(&t, n);
        for slot in sample_indices(rng, count as usize, replaced as usize) {
            holders[slot] = Some(code);
        }
    }
    let mut counts = std::collections::BTreeMap::new();
    for code in holders.into_iter().flatten() {
        *counts.entry(code).or_insert(0u64) += 1;
    }
    counts.into_iter().collect()
}

struct TupleSource<'a> {
    w: &'a TupleData,
    g: &'a GFunction,
    k: usize,
}

impl SumSource for TupleSource<'_> {
    fn law(&self) -> DrawLaw {
        DrawLaw::FWeighted
    }

    fn index_words(&self) -> usize {
        self.k
    }

    fn mass_f(&self, f: &FunctionSpec) -> f64 {
        distinct_tuples(self.w.cols(), self.k)
            .map(|t| f.eval(tuple_weight(self.w, self.g, &t)))
            .sum()
    }

    fn total_weight(&self, f: &FunctionSpec) -> f64 {
        self.mass_f(f)
    }

    fn draw(&self, count: u64, f: &FunctionSpec, rng: &mut ChaCha8Rng) -> Vec<(u64, u64)> {
        reservoir_many(self.w, f, self.g, self.k, count, rng)
    }

    fn value(&self, x: u64) -> f64 {
        tuple_weight(self.w, self.g, &decode(x, self.w.cols(), self.k))
    }
}

fn check_tuple_data(data: &[TupleData], k: usize) -> Result<usize, MomentsError> {
    let n = data.first().ok_or(MomentsError::NoServers)?.cols();
    for (t, w) in data.iter().enumerate() {
        if w.cols() != n {
            return Err(MomentsError::LengthMismatch {
                expected: n,
                actual: w.cols(),
            });
        }
        if let Some(index) = w.as_slice().iter().position(|x| *x < 0.0) {
            return Err(MomentsError::InvalidEntry { server: t + 1, index });
        }
    }
    if k == 0 || k > n {
        return Err(MomentsError::InvalidParameter(format!("tuple order {k} must lie in 1..={n}")));
    }
    Ok(n)
}

/// Estimates `M(f, g, k)` by two-level sampling over distinct `k`-tuples,
/// each server drawing with [`rejection_sample_tuple`]'s rule.
pub fn generalized_moment(
    data: &[TupleData],
    f: &FunctionSpec,
    g: &GFunction,
    k: usize,
    eps: f64,
    master_seed: u64,
    config: &MomentConfig,
) -> Result<MomentRun, MomentsError> {
    check_tuple_data(data, k)?;
    let sources: Vec<TupleSource<'_>> = data.iter().map(|w| TupleSource { w, g, k }).collect();
    let refs: Vec<&TupleSource<'_>> = sources.iter().collect();
    run_sum(&refs, f, eps, master_seed, config)
}

/// `M(f, g, k)` by enumerating every distinct tuple.
pub fn exact_generalized_moment(data: &[TupleData], f: &FunctionSpec, g: &GFunction, k: usize) -> Result<f64, MomentsError> {
    let n = check_tuple_data(data, k)?;
    Ok(distinct_tuples(n, k)
        .map(|t| f.eval(data.iter().map(|w| tuple_weight(w, g, &t)).sum()))
        .sum())
}
