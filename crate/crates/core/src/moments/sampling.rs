use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Binomial;

use super::FunctionSpec;
use crate::commsim::Payload;

/// Counts of `n` i.i.d. draws from the distribution proportional to
/// `weights`, via sequential conditional binomials.
pub fn multinomial<R: Rng + ?Sized>(n: u64, weights: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; weights.len()];
    let mut remaining_n = n;
    let mut remaining_w: f64 = weights.iter().sum();
    for (slot, &w) in out.iter_mut().zip(weights) {
        if remaining_n == 0 || remaining_w <= 0.0 {
            break;
        }
        let p = (w / remaining_w).clamp(0.0, 1.0);
        let c = if p >= 1.0 {
            remaining_n
        } else {
            Binomial::new(remaining_n, p).expect("p in [0, 1]").sample(rng)
        };
        *slot = c;
        remaining_n -= c;
        remaining_w -= w;
    }
    out
}

/// One draw of the two-level sampler: a server `t` with probability
/// `C_t / B`, then an index `i` with probability `f(a_ti) / C_t`. Returns
/// `(i, t)` with `t` 1-based, so `i` is hit with probability `B_i / B`.
/// `None` when every `f(a_ti)` is zero.
pub fn two_level_sample<R: Rng + ?Sized>(vectors: &[Vec<f64>], f: &FunctionSpec, rng: &mut R) -> Option<(usize, usize)> {
    let masses: Vec<f64> = vectors.iter().map(|v| v.iter().map(|x| f.eval(*x)).sum()).collect();
    let server = WeightedIndex::new(&masses).ok()?.sample(rng);
    let index = WeightedIndex::new(vectors[server].iter().map(|x| f.eval(*x))).ok()?.sample(rng);
    Some((index, server + 1))
}

/// Server-side draws of `count` indices with probability `weights[i] / Σweights`.
pub(crate) fn weighted_draws<R: Rng + ?Sized>(weights: &[f64], count: u64, rng: &mut R) -> Vec<(u64, u64)> {
    if count == 0 {
        return Vec::new();
    }
    let dist = WeightedIndex::new(weights).expect("positive total weight");
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for _ in 0..count {
        *counts.entry(dist.sample(rng) as u64).or_default() += 1;
    }
    counts.into_iter().collect()
}

/// Sampled indices with multiplicities. Sent either as the raw list of
/// draws or as `(index, count)` pairs, whichever is shorter.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct SampleBatch {
    pub counts: Vec<(u64, u64)>,
    /// Words per index (`k` for a `k`-tuple).
    pub index_words: usize,
}

impl SampleBatch {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|(_, c)| c).sum()
    }
}

impl Payload for SampleBatch {
    fn words(&self) -> usize {
        let raw = self.total() as usize * self.index_words;
        let counted = self.counts.len() * (self.index_words + 1);
        raw.min(counted)
    }
}

/// Sampled indices with multiplicities and the sender's value at each:
/// raw `(index, value)` per draw or `(index, count, value)` per index.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct ValuedBatch {
    pub entries: Vec<(u64, u64, f64)>,
}

impl Payload for ValuedBatch {
    fn words(&self) -> usize {
        let total: u64 = self.entries.iter().map(|e| e.1).sum();
        (2 * total as usize).min(3 * self.entries.len())
    }
}
