//! Near-optimal estimation of `Σ_i f(Σ_t a_ti)` for `f` with log-log
//! Lipschitz exponent `L` (`f = x^k` gives `L = k`).
//!
//! Phase 1 averages exact `ρ_i` over a small `B_i/B` sample and stops when
//! that already shows `A ≥ sB`. Phase 2 buckets a larger sample by `ρ_i` on
//! the grid `β_j = s^{L−1}·e^{−jε}` and estimates each bucket's share from a
//! random subset `T_β`, using cheap median estimates `Ã_i` and the sampler's
//! own value `B̃_i = f(a_{t(i),i})` to decide which indices deserve an exact
//! query.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::marker::PhantomData;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_distr::{Binomial, Distribution};
use rand_chacha::ChaCha8Rng;

use super::sampling::{multinomial, weighted_draws, SampleBatch, ValuedBatch};
use super::{check_eps, guarded_ln, FunctionSpec, MomentConfig, MomentRun, MomentsError, PartitionedVectors, Phase};
use crate::commsim::{run_protocol_with, Envelope, FabricError, Payload, Protocol, ServerCtx, ServerId, Step};

/// Quantities exposed for property checks.
#[derive(Debug, Clone, Default)]
pub struct FrequencyDiagnostics {
    /// Every `ρ_i` computed from a complete column, phase 1 and phase 2.
    pub exact_rho: Vec<f64>,
    /// `(B̃_i, B_i)` for phase-2 positions whose column became fully known.
    pub crude_pairs: Vec<(f64, f64)>,
    /// Phase-1 estimate `B·avg(ρ)`.
    pub coarse_estimate: Option<f64>,
    /// `|T_β|` per grid point.
    pub subset_sizes: Vec<usize>,
    /// Grid points `β_j`.
    pub grid: Vec<f64>,
}

/// Server multiplicities for `l` uniform draws with replacement from
/// `counts.len()` servers, written into `counts`.
fn draw_servers_into<R: Rng + ?Sized>(l: u64, rng: &mut R, counts: &mut [u64]) {
    let s = counts.len();
    counts.fill(0);
    if l <= 4 * s as u64 {
        for _ in 0..l {
            counts[rng.random_range(0..s)] += 1;
        }
    } else {
        let mut left = l;
        for t in 0..s - 1 {
            if left == 0 {
                break;
            }
            let c = Binomial::new(left, 1.0 / (s - t) as f64).expect("p in (0, 1]").sample(rng);
            counts[t] = c;
            left -= c;
        }
        counts[s - 1] += left;
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over `reps` repetitions of `f((s/l)·Σ_{t∈L} a_t)` with `L` a
/// multiset of `l` servers drawn uniformly with replacement; `column[t]` is
/// `a_{t+1,i}`.
pub fn median_sum_estimate<R: Rng + ?Sized>(column: &[f64], l: u64, reps: usize, f: &FunctionSpec, rng: &mut R) -> f64 {
    let s = column.len();
    let mut counts = vec![0; s];
    let mut est: Vec<f64> = (0..reps)
        .map(|_| {
            draw_servers_into(l, rng, &mut counts);
            let z: f64 = counts.iter().zip(column).map(|(c, a)| *c as f64 * a).sum();
            f.eval(s as f64 / l as f64 * z)
        })
        .collect();
    median(&mut est)
}

#[derive(Clone)]
enum Down {
    Report,
    Draw { count: u64, with_values: bool },
    Query(Arc<Vec<u64>>),
}

impl Payload for Down {
    fn words(&self) -> usize {
        match self {
            Down::Report => 0,
            Down::Draw { .. } => 1,
            Down::Query(q) => q.len(),
        }
    }
}

enum Up {
    Mass(f64),
    Samples(SampleBatch),
    Valued(ValuedBatch),
    Values(Vec<f64>),
}

impl Payload for Up {
    fn words(&self) -> usize {
        match self {
            Up::Mass(_) => 1,
            Up::Samples(b) => b.words(),
            Up::Valued(b) => b.words(),
            Up::Values(v) => v.len(),
        }
    }
}

struct ServerData<'a> {
    a: &'a [f64],
    f: &'a FunctionSpec,
}

#[derive(Clone, Copy)]
struct Position {
    index: u64,
    value: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Start,
    Masses,
    CoarseSamples,
    CoarseValues,
    Samples,
    Estimates,
    Exact,
}

struct Params {
    s: usize,
    l_exp: f64,
    eps: f64,
    coarse: u64,
    sample: u64,
    reps: usize,
    subset_factor: f64,
    filter_factor: f64,
}

impl Params {
    fn new(s: usize, l_exp: f64, eps: f64, c: &MomentConfig) -> Self {
        let ln = guarded_ln(s);
        let sf = s as f64;
        let eps3 = eps.powi(3);
        Self {
            s,
            l_exp,
            eps,
            coarse: (c.coarse_factor * sf.powf(l_exp - 2.0) / eps3).ceil().max(1.0) as u64,
            sample: (c.sample_factor * sf.powf(l_exp - 1.0) * ln * ln / eps3).ceil().max(1.0) as u64,
            reps: (c.repetition_factor * (l_exp * ln + (1.0 / eps).ln())).ceil().max(1.0) as usize,
            subset_factor: c.subset_factor,
            filter_factor: c.filter_factor,
        }
    }

    fn top(&self) -> f64 {
        (self.s as f64).powf(self.l_exp - 1.0)
    }

    fn grid(&self) -> Vec<f64> {
        let span = (self.l_exp - 1.0) * (self.s as f64).ln() / self.eps;
        let last = (span.ceil() as i64 - 1).max(0) as usize;
        (0..=last).map(|j| self.top() * (-(j as f64) * self.eps).exp()).collect()
    }

    fn subset_size(&self, beta: f64, sample: usize) -> usize {
        let ln = guarded_ln(self.s);
        ((self.subset_factor * beta * ln * ln / self.eps.powi(3)).ceil() as usize).clamp(1, sample)
    }

    fn servers_per_estimate(&self, beta: f64) -> u64 {
        (self.top() / beta).ceil().max(1.0) as u64
    }

    fn window(&self, beta: f64) -> (f64, f64) {
        let lo = beta * (-self.eps * (1.0 + 2.0 / self.l_exp)).exp();
        let hi = self.filter_factor * self.s as f64 * guarded_ln(self.s) * beta;
        (lo, hi)
    }
}

/// Bucket `j` holds `ρ ∈ [β_j e^{−ε}, β_j)`; the top bucket also takes
/// `ρ = β_0` and the bottom one everything below its lower edge.
fn bucket_of(grid: &[f64], eps: f64, rho: f64) -> usize {
    let lower = (-eps).exp();
    for (j, beta) in grid.iter().enumerate() {
        let closed_top = j == 0 && rho <= *beta;
        if rho >= beta * lower && (rho < *beta || closed_top) {
            return j;
        }
    }
    if rho > grid[0] {
        0
    } else {
        grid.len() - 1
    }
}

struct Engine {
    p: Params,
    f: FunctionSpec,
    stage: Stage,
    masses: Vec<f64>,
    total: f64,
    coarse_counts: BTreeMap<u64, u64>,
    coarse_query: Arc<Vec<u64>>,
    positions: Vec<Position>,
    known: HashMap<(usize, u64), f64>,
    grid: Vec<f64>,
    subsets: Vec<Vec<usize>>,
    draw_seeds: Vec<u64>,
    requests: Vec<Vec<u64>>,
    candidates: Vec<(usize, usize)>,
    diag: FrequencyDiagnostics,
}

fn values_of(replies: Vec<(ServerId, Up)>) -> Result<Vec<(ServerId, Vec<f64>)>, FabricError> {
    replies
        .into_iter()
        .map(|(id, up)| match up {
            Up::Values(v) => Ok((id, v)),
            _ => Err(FabricError::step_failed(id, "expected values")),
        })
        .collect()
}

impl Engine {
    fn exact_column(&self, index: u64) -> Option<(f64, f64)> {
        let mut sum = 0.0;
        let mut b = 0.0;
        for t in 1..=self.p.s {
            let v = *self.known.get(&(t, index))?;
            sum += v;
            b += self.f.eval(v);
        }
        Some((self.f.eval(sum), b))
    }

    fn rho(&mut self, index: u64) -> Option<f64> {
        let (a, b) = self.exact_column(index)?;
        let rho = a / b;
        self.diag.exact_rho.push(rho);
        Some(rho)
    }

    fn record(&mut self, replies: Vec<(ServerId, Vec<f64>)>, asked: impl Fn(ServerId) -> Vec<u64>) -> Result<(), FabricError> {
        for (id, vals) in replies {
            let idx = asked(id);
            if idx.len() != vals.len() {
                return Err(FabricError::step_failed(id, "wrong number of values"));
            }
            for (i, v) in idx.into_iter().zip(vals) {
                self.known.insert((id, i), v);
            }
        }
        Ok(())
    }

    fn send_each(&self, lists: &[Vec<u64>]) -> Step<Down, Outcome> {
        Step::Send(
            lists
                .iter()
                .enumerate()
                .filter(|(_, q)| !q.is_empty())
                .map(|(t, q)| Envelope {
                    to: t + 1,
                    payload: Down::Query(Arc::new(q.clone())),
                })
                .collect(),
        )
    }

    fn draw_step(&self, n: u64, with_values: bool, rng: &mut ChaCha8Rng) -> Step<Down, Outcome> {
        let counts = multinomial(n, &self.masses, rng);
        Step::Send(
            counts
                .into_iter()
                .enumerate()
                .filter(|(_, c)| *c > 0)
                .map(|(t, count)| Envelope {
                    to: t + 1,
                    payload: Down::Draw { count, with_values },
                })
                .collect(),
        )
    }

    /// The stream of `L` draws for position `pos` at grid point `j`.
    fn position_rng(&self, j: usize, pos: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.draw_seeds[j]);
        rng.set_stream(pos as u64);
        rng
    }

    fn plan_estimates(&mut self, rng: &mut ChaCha8Rng) -> Step<Down, Outcome> {
        self.grid = self.p.grid();
        self.diag.grid = self.grid.clone();
        let size = self.positions.len();
        for j in 0..self.grid.len() {
            let t = self.p.subset_size(self.grid[j], size);
            let mut subset = sample_indices(rng, size, t).into_vec();
            subset.sort_unstable();
            self.diag.subset_sizes.push(subset.len());
            self.subsets.push(subset);
            self.draw_seeds.push(rng.random());
        }
        let sn = self.p.s;
        let mut wanted: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); sn];
        let mut covered: HashSet<u64> = HashSet::new();
        let mut counts = vec![0u64; sn];
        for j in 0..self.grid.len() {
            let l = self.p.servers_per_estimate(self.grid[j]);
            for &pos in &self.subsets[j] {
                let index = self.positions[pos].index;
                if covered.contains(&index) {
                    continue;
                }
                let mut rng = self.position_rng(j, pos);
                for _ in 0..self.p.reps {
                    draw_servers_into(l, &mut rng, &mut counts);
                    for (t, c) in counts.iter().enumerate() {
                        if *c > 0 && !self.known.contains_key(&(t + 1, index)) {
                            wanted[t].insert(index);
                        }
                    }
                }
                if (0..sn).all(|t| self.known.contains_key(&(t + 1, index)) || wanted[t].contains(&index)) {
                    covered.insert(index);
                }
            }
        }
        self.requests = wanted.into_iter().map(|w| w.into_iter().collect()).collect();
        self.send_each(&self.requests)
    }

    fn filter_candidates(&mut self) -> Vec<Vec<u64>> {
        let sn = self.p.s;
        let mut columns: HashMap<u64, Vec<f64>> = HashMap::new();
        for subset in &self.subsets {
            for &pos in subset {
                let index = self.positions[pos].index;
                columns.entry(index).or_insert_with(|| {
                    (1..=sn).map(|t| self.known.get(&(t, index)).copied().unwrap_or(f64::NAN)).collect()
                });
            }
        }
        let mut candidates = Vec::new();
        let mut counts = vec![0u64; sn];
        let mut est = vec![0.0; self.p.reps];
        for j in 0..self.grid.len() {
            let l = self.p.servers_per_estimate(self.grid[j]);
            let (lo, hi) = self.p.window(self.grid[j]);
            let scale = sn as f64 / l as f64;
            for &pos in &self.subsets[j] {
                let p = self.positions[pos];
                let column = &columns[&p.index];
                let mut rng = self.position_rng(j, pos);
                for slot in est.iter_mut() {
                    draw_servers_into(l, &mut rng, &mut counts);
                    let z: f64 = counts
                        .iter()
                        .zip(column)
                        .filter(|(c, _)| **c > 0)
                        .map(|(c, a)| *c as f64 * a)
                        .sum();
                    *slot = self.f.eval(scale * z);
                }
                let rho_tilde = median(&mut est) / self.f.eval(p.value);
                if rho_tilde >= lo && rho_tilde <= hi {
                    candidates.push((j, pos));
                }
            }
        }
        self.candidates = candidates;
        let mut missing: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); self.p.s];
        for &(_, pos) in &self.candidates {
            let index = self.positions[pos].index;
            for t in 1..=self.p.s {
                if !self.known.contains_key(&(t, index)) {
                    missing[t - 1].insert(index);
                }
            }
        }
        missing.into_iter().map(|m| m.into_iter().collect()).collect()
    }

    fn finish(&mut self) -> Outcome {
        let mut members = vec![0usize; self.grid.len()];
        let mut rho_cache: HashMap<u64, f64> = HashMap::new();
        for (j, pos) in self.candidates.clone() {
            let p = self.positions[pos];
            let rho = match rho_cache.get(&p.index) {
                Some(r) => *r,
                None => {
                    let r = self.rho(p.index).expect("candidate columns are complete");
                    rho_cache.insert(p.index, r);
                    r
                }
            };
            let b = self.exact_column(p.index).expect("complete").1;
            self.diag.crude_pairs.push((self.f.eval(p.value), b));
            if bucket_of(&self.grid, self.p.eps, rho) == j {
                members[j] += 1;
            }
        }
        let size = self.positions.len() as f64;
        let shrink = (-self.p.eps / 2.0).exp();
        let weighted: f64 = members
            .iter()
            .zip(&self.subsets)
            .zip(&self.grid)
            .map(|((m, subset), beta)| *m as f64 * size / subset.len() as f64 * beta * shrink)
            .sum();
        (self.total / size * weighted, Phase::Full, std::mem::take(&mut self.diag))
    }
}

impl<'a> Protocol for EngineFor<'a> {
    type Input = ServerData<'a>;
    type Local = ();
    type Down = Down;
    type Up = Up;
    type Output = Outcome;

    fn round_bound(&self) -> usize {
        8
    }

    fn coordinate(
        &mut self,
        _done: usize,
        replies: Vec<(ServerId, Up)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Step<Down, Outcome>, FabricError> {
        let e = &mut self.0;
        match e.stage {
            Stage::Start => {
                e.stage = Stage::Masses;
                Ok(Step::broadcast(e.p.s, Down::Report))
            }
            Stage::Masses => {
                e.masses = vec![0.0; e.p.s];
                for (id, up) in replies {
                    let Up::Mass(c) = up else {
                        return Err(FabricError::step_failed(id, "expected a mass"));
                    };
                    e.masses[id - 1] = c;
                }
                e.total = e.masses.iter().sum();
                if e.total <= 0.0 {
                    return Ok(Step::Halt((0.0, Phase::Empty, std::mem::take(&mut e.diag))));
                }
                e.stage = Stage::CoarseSamples;
                Ok(e.draw_step(e.p.coarse, false, rng))
            }
            Stage::CoarseSamples => {
                for (id, up) in replies {
                    let Up::Samples(b) = up else {
                        return Err(FabricError::step_failed(id, "expected samples"));
                    };
                    for (i, c) in b.counts {
                        *e.coarse_counts.entry(i).or_default() += c;
                    }
                }
                e.coarse_query = Arc::new(e.coarse_counts.keys().copied().collect());
                e.stage = Stage::CoarseValues;
                Ok(Step::broadcast(e.p.s, Down::Query(Arc::clone(&e.coarse_query))))
            }
            Stage::CoarseValues => {
                let q = Arc::clone(&e.coarse_query);
                e.record(values_of(replies)?, |_| q.to_vec())?;
                let mut acc = 0.0;
                for (i, c) in e.coarse_counts.clone() {
                    acc += c as f64 * e.rho(i).ok_or_else(|| FabricError::step_failed(0, "incomplete column"))?;
                }
                let coarse = e.total * acc / e.p.coarse as f64;
                e.diag.coarse_estimate = Some(coarse);
                if acc >= e.p.s as f64 * e.p.coarse as f64 {
                    return Ok(Step::Halt((coarse, Phase::Coarse, std::mem::take(&mut e.diag))));
                }
                e.stage = Stage::Samples;
                Ok(e.draw_step(e.p.sample, true, rng))
            }
            Stage::Samples => {
                for (id, up) in replies {
                    let Up::Valued(b) = up else {
                        return Err(FabricError::step_failed(id, "expected valued samples"));
                    };
                    for (index, count, value) in b.entries {
                        e.known.insert((id, index), value);
                        for _ in 0..count {
                            e.positions.push(Position { index, value });
                        }
                    }
                }
                e.stage = Stage::Estimates;
                Ok(e.plan_estimates(rng))
            }
            Stage::Estimates => {
                let requests = e.requests.clone();
                e.record(values_of(replies)?, |id| requests[id - 1].clone())?;
                let missing = e.filter_candidates();
                if missing.iter().all(|m| m.is_empty()) {
                    return Ok(Step::Halt(e.finish()));
                }
                e.requests = missing;
                e.stage = Stage::Exact;
                Ok(e.send_each(&e.requests))
            }
            Stage::Exact => {
                let requests = e.requests.clone();
                e.record(values_of(replies)?, |id| requests[id - 1].clone())?;
                Ok(Step::Halt(e.finish()))
            }
        }
    }

    fn serve(ctx: &mut ServerCtx<'_, ServerData<'a>, ()>, msg: &Down) -> Result<Up, FabricError> {
        let data = ctx.input();
        let (a, f) = (data.a, data.f);
        Ok(match msg {
            Down::Report => Up::Mass(a.iter().map(|x| f.eval(*x)).sum()),
            Down::Draw { count, with_values } => {
                let w: Vec<f64> = a.iter().map(|x| f.eval(*x)).collect();
                let counts = weighted_draws(&w, *count, ctx.rng());
                if *with_values {
                    Up::Valued(ValuedBatch {
                        entries: counts.into_iter().map(|(i, c)| (i, c, a[i as usize])).collect(),
                    })
                } else {
                    Up::Samples(SampleBatch { counts, index_words: 1 })
                }
            }
            Down::Query(q) => Up::Values(
                q.iter()
                    .map(|i| a.get(*i as usize).copied().ok_or_else(|| ctx.fail(format!("index {i} out of range"))))
                    .collect::<Result<_, _>>()?,
            ),
        })
    }
}

struct EngineFor<'a>(Engine, PhantomData<&'a ()>);

type Outcome = (f64, Phase, FrequencyDiagnostics);

fn run_engine(
    input: &PartitionedVectors,
    f: &FunctionSpec,
    l_exp: f64,
    eps: f64,
    master_seed: u64,
    config: &MomentConfig,
) -> Result<(MomentRun, FrequencyDiagnostics), MomentsError> {
    check_eps(eps)?;
    if !(l_exp >= 1.0 && l_exp.is_finite()) {
        return Err(MomentsError::InvalidParameter(format!("exponent {l_exp} must be at least 1")));
    }
    let s = input.servers();
    f.validate(s)?;
    let p = Params::new(s, l_exp, eps, config);
    let sample = p.sample as usize;
    let engine = Engine {
        p,
        f: f.clone(),
        stage: Stage::Start,
        masses: Vec::new(),
        total: 0.0,
        coarse_counts: BTreeMap::new(),
        coarse_query: Arc::new(Vec::new()),
        positions: Vec::new(),
        known: HashMap::new(),
        grid: Vec::new(),
        subsets: Vec::new(),
        draw_seeds: Vec::new(),
        requests: Vec::new(),
        candidates: Vec::new(),
        diag: FrequencyDiagnostics::default(),
    };
    let inputs = input.vectors().iter().map(|a| ServerData { a, f }).collect();
    let outcome = run_protocol_with(EngineFor(engine, PhantomData), inputs, master_seed, config.schedule)?;
    let (estimate, phase, diag) = outcome.output;
    let samples = match phase {
        Phase::Full => sample,
        _ => 0,
    };
    Ok((
        MomentRun {
            estimate,
            ledger: outcome.ledger,
            phase: Some(phase),
            samples,
        },
        diag,
    ))
}

/// Estimates `Σ_i (Σ_t a_ti)^k` for `k ≥ 2`.
pub fn frequency_moments(
    input: &PartitionedVectors,
    k: u32,
    eps: f64,
    master_seed: u64,
    config: &MomentConfig,
) -> Result<(MomentRun, FrequencyDiagnostics), MomentsError> {
    if k < 2 {
        return Err(MomentsError::InvalidParameter(format!("moment order {k} must be at least 2")));
    }
    run_engine(input, &FunctionSpec::power(k, input.servers()), k as f64, eps, master_seed, config)
}

/// Estimates `Σ_i f(Σ_t a_ti)` with every exponent replaced by `L_f`.
pub fn lipschitz_moments(
    input: &PartitionedVectors,
    f: &FunctionSpec,
    eps: f64,
    master_seed: u64,
    config: &MomentConfig,
) -> Result<(MomentRun, FrequencyDiagnostics), MomentsError> {
    let l = f.lipschitz().ok_or_else(|| MomentsError::MissingLipschitz(f.name().to_string()))?;
    run_engine(input, f, l, eps, master_seed, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{moment_vectors, MomentProfile};
    use proptest::prelude::*;

    fn input(profile: MomentProfile, s: usize, n: usize, seed: u64) -> PartitionedVectors {
        PartitionedVectors::new(moment_vectors(profile, s, n, seed)).unwrap()
    }

    #[test]
    fn identical_columns_stop_after_phase_one_exactly() {
        let data = input(MomentProfile::Constant, 4, 50, 1);
        let (run, diag) = frequency_moments(&data, 3, 0.5, 7, &MomentConfig::default()).unwrap();
        let exact = super::super::exact_moment(&data, &FunctionSpec::power(3, 4));
        assert_eq!(run.phase, Some(Phase::Coarse));
        assert!((run.estimate - exact).abs() <= 1e-9 * exact);
        assert!(diag.exact_rho.iter().all(|r| (r - 16.0).abs() < 1e-9));
        assert!(run.ledger.rounds() <= 3);
    }

    #[test]
    fn one_server_is_exact() {
        let data = input(MomentProfile::Uniform, 1, 40, 2);
        let (run, _) = frequency_moments(&data, 2, 0.3, 3, &MomentConfig::default()).unwrap();
        let exact = super::super::exact_moment(&data, &FunctionSpec::power(2, 1));
        assert_eq!(run.phase, Some(Phase::Coarse));
        assert!((run.estimate - exact).abs() <= 1e-9 * exact);
    }

    #[test]
    fn zero_input_is_empty() {
        let data = PartitionedVectors::new(vec![vec![0.0; 5]; 3]).unwrap();
        let (run, _) = frequency_moments(&data, 2, 0.5, 1, &MomentConfig::default()).unwrap();
        assert_eq!(run.estimate, 0.0);
        assert_eq!(run.phase, Some(Phase::Empty));
        assert_eq!(run.ledger.rounds(), 1);
    }

    #[test]
    fn disjoint_support_runs_phase_two_accurately() {
        let data = input(MomentProfile::Disjoint, 4, 300, 5);
        let f = FunctionSpec::power(2, 4);
        let exact = super::super::exact_moment(&data, &f);
        let mut good = 0;
        for seed in 0..10 {
            let (run, diag) = frequency_moments(&data, 2, 0.3, seed, &MomentConfig::default()).unwrap();
            assert_eq!(run.phase, Some(Phase::Full));
            assert!(run.ledger.rounds() <= 8);
            assert!(!diag.grid.is_empty());
            if (run.estimate - exact).abs() <= 0.3 * exact {
                good += 1;
            }
        }
        assert!(good >= 8, "{good}/10 within tolerance");
    }

    #[test]
    fn mixed_profile_stays_in_budget() {
        let (s, k, eps) = (4usize, 3u32, 0.5);
        let data = input(MomentProfile::Mixed, s, 400, 9);
        let f = FunctionSpec::power(k, s);
        let exact = super::super::exact_moment(&data, &f);
        let (run, _) = frequency_moments(&data, k, eps, 11, &MomentConfig::default()).unwrap();
        assert!(run.ledger.rounds() <= 8);
        let ln = guarded_ln(s);
        let budget = 1000.0 * (s as f64).powi(k as i32 - 1) * ln.powi(3) / eps.powi(3) * 50.0;
        assert!((run.ledger.total_words() as f64) <= budget);
        assert!((run.estimate - exact).abs() <= 0.5 * exact, "{} vs {exact}", run.estimate);
    }

    #[test]
    fn schedules_agree() {
        let data = input(MomentProfile::Mixed, 3, 120, 4);
        let seq = MomentConfig {
            schedule: crate::commsim::Schedule::Sequential,
            ..MomentConfig::default()
        };
        let par = MomentConfig {
            schedule: crate::commsim::Schedule::Parallel,
            ..MomentConfig::default()
        };
        let a = frequency_moments(&data, 2, 0.5, 3, &seq).unwrap().0;
        let b = frequency_moments(&data, 2, 0.5, 3, &par).unwrap().0;
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn power_function_matches_frequency_moments() {
        let data = input(MomentProfile::Mixed, 3, 150, 8);
        let (a, _) = frequency_moments(&data, 3, 0.5, 21, &MomentConfig::default()).unwrap();
        let (b, _) = lipschitz_moments(&data, &FunctionSpec::power(3, 3), 0.5, 21, &MomentConfig::default()).unwrap();
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn lipschitz_requires_exponent() {
        let data = input(MomentProfile::Uniform, 2, 10, 1);
        let f = FunctionSpec::new("x^2", |x| x * x, Some(2.0), None);
        assert!(matches!(
            lipschitz_moments(&data, &f, 0.5, 1, &MomentConfig::default()),
            Err(MomentsError::MissingLipschitz(_))
        ));
        assert!(frequency_moments(&data, 1, 0.5, 1, &MomentConfig::default()).is_err());
    }

    #[test]
    fn quartic_plus_quintic_runs() {
        let data = input(MomentProfile::Mixed, 3, 100, 6);
        let f = FunctionSpec::quartic_plus_quintic(3);
        let exact = super::super::exact_moment(&data, &f);
        let (run, _) = lipschitz_moments(&data, &f, 0.5, 2, &MomentConfig::default()).unwrap();
        assert!(run.ledger.rounds() <= 8);
        assert!((run.estimate - exact).abs() <= 0.5 * exact, "{} vs {exact}", run.estimate);
    }

    #[test]
    fn bucket_edges() {
        let p = Params::new(4, 3.0, 0.5, &MomentConfig::default());
        let grid = p.grid();
        assert_eq!(grid[0], 16.0);
        assert_eq!(bucket_of(&grid, 0.5, 16.0), 0);
        assert_eq!(bucket_of(&grid, 0.5, 15.0), 0);
        assert_eq!(bucket_of(&grid, 0.5, 1e-9), grid.len() - 1);
        assert_eq!(bucket_of(&grid, 0.5, 16.0 * (-0.75f64).exp()), 1);
    }

    #[test]
    fn median_estimate_fails_rarely() {
        let column = vec![1.0, 0.5, 2.0, 0.0, 0.0, 1.5, 0.2, 0.8];
        let f = FunctionSpec::power(2, 8);
        let truth = f.eval(column.iter().sum());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut misses = 0;
        for _ in 0..500 {
            let est = median_sum_estimate(&column, 64, 15, &f, &mut rng);
            if (est - truth).abs() > 0.5 * truth {
                misses += 1;
            }
        }
        assert!(misses <= 10, "{misses}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rho_and_crude_bounds(seed in 0u64..1000, s in 2usize..5, k in 2u32..4) {
            let data = input(MomentProfile::Mixed, s, 80, seed);
            let (_, diag) = frequency_moments(&data, k, 0.5, seed, &MomentConfig::default()).unwrap();
            let top = (s as f64).powi(k as i32 - 1);
            for r in &diag.exact_rho {
                prop_assert!(*r >= 1.0 - 1e-9 && *r <= top * (1.0 + 1e-9));
            }
            for (crude, b) in &diag.crude_pairs {
                prop_assert!(*crude <= b * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn crude_value_is_rarely_tiny() {
        let s = 4;
        let data = input(MomentProfile::Uniform, s, 200, 12);
        let f = FunctionSpec::power(2, s);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = 0.1;
        let draws = 20_000;
        let mut tiny = 0;
        for _ in 0..draws {
            let (i, t) = super::super::two_level_sample(data.vectors(), &f, &mut rng).unwrap();
            let b: f64 = data.vectors().iter().map(|v| f.eval(v[i])).sum();
            if f.eval(data.vectors()[t - 1][i]) <= delta * b / s as f64 {
                tiny += 1;
            }
        }
        assert!((tiny as f64 / draws as f64) <= delta);
    }
}
