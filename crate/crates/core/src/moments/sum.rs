use std::collections::{BTreeMap, HashMap};
use std::marker::PhantomData;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;

use super::sampling::{multinomial, weighted_draws, SampleBatch};
use super::{check_eps, FunctionSpec, MomentConfig, MomentRun, MomentsError, PartitionedVectors};
use crate::commsim::{run_protocol_with, Envelope, FabricError, Payload, Protocol, ServerCtx, ServerId, Step};

/// How a server's draws are distributed over its index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DrawLaw {
    /// Probability `f(v_t(x)) / C_t`; the server reports only `C_t`.
    FWeighted,
    /// Probability `v_t(x) / W_t`; the server reports `C_t` and `W_t`.
    ValueWeighted,
}

/// One server's view of the summation problem.
pub(crate) trait SumSource: Sync {
    fn law(&self) -> DrawLaw;
    fn index_words(&self) -> usize {
        1
    }
    /// `C_t = Σ_x f(v_t(x))`.
    fn mass_f(&self, f: &FunctionSpec) -> f64;
    /// `W_t`, the normalizer of the draw law (unused for `FWeighted`).
    fn total_weight(&self, f: &FunctionSpec) -> f64;
    /// `count` i.i.d. draws, merged into `(index, multiplicity)`.
    fn draw(&self, count: u64, f: &FunctionSpec, rng: &mut ChaCha8Rng) -> Vec<(u64, u64)>;
    /// `v_t(x)`.
    fn value(&self, x: u64) -> f64;
}

impl SumSource for [f64] {
    fn law(&self) -> DrawLaw {
        DrawLaw::FWeighted
    }

    fn mass_f(&self, f: &FunctionSpec) -> f64 {
        self.iter().map(|x| f.eval(*x)).sum()
    }

    fn total_weight(&self, f: &FunctionSpec) -> f64 {
        self.mass_f(f)
    }

    fn draw(&self, count: u64, f: &FunctionSpec, rng: &mut ChaCha8Rng) -> Vec<(u64, u64)> {
        let w: Vec<f64> = self.iter().map(|x| f.eval(*x)).collect();
        weighted_draws(&w, count, rng)
    }

    fn value(&self, x: u64) -> f64 {
        self.get(x as usize).copied().unwrap_or(0.0)
    }
}

/// A server that can draw `x` with probability `h_t(x) / Σ_y h_t(y)` and
/// evaluate `h_t(x)` and `Σ_x f(h_t(x))`. The summed quantity is
/// `Σ_x f(Σ_t h_t(x))`.
pub trait SampleableDomain: Sync {
    fn draw(&self, rng: &mut ChaCha8Rng) -> u64;
    fn weight(&self, x: u64) -> f64;
    fn total_weight(&self) -> f64;
    fn mass_f(&self, f: &FunctionSpec) -> f64;
}

struct DomainSource<'a, D>(&'a D);

impl<D: SampleableDomain> SumSource for DomainSource<'_, D> {
    fn law(&self) -> DrawLaw {
        DrawLaw::ValueWeighted
    }

    fn mass_f(&self, f: &FunctionSpec) -> f64 {
        self.0.mass_f(f)
    }

    fn total_weight(&self, _: &FunctionSpec) -> f64 {
        self.0.total_weight()
    }

    fn draw(&self, count: u64, _: &FunctionSpec, rng: &mut ChaCha8Rng) -> Vec<(u64, u64)> {
        let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
        for _ in 0..count {
            *counts.entry(self.0.draw(rng)).or_default() += 1;
        }
        counts.into_iter().collect()
    }

    fn value(&self, x: u64) -> f64 {
        self.0.weight(x)
    }
}

/// Finitely many points with nonnegative weights.
#[derive(Debug, Clone)]
pub struct FiniteDomain {
    points: Vec<(u64, f64)>,
    lookup: HashMap<u64, f64>,
    dist: Option<WeightedIndex<f64>>,
}

impl FiniteDomain {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self, MomentsError> {
        if points.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(MomentsError::InvalidParameter("domain weights must be finite and nonnegative".into()));
        }
        let mut lookup = HashMap::new();
        for (x, w) in &points {
            if lookup.insert(*x, *w).is_some() {
                return Err(MomentsError::InvalidParameter(format!("point {x} listed twice")));
            }
        }
        let dist = WeightedIndex::new(points.iter().map(|p| p.1)).ok();
        Ok(Self { points, lookup, dist })
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }
}

impl SampleableDomain for FiniteDomain {
    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        let dist = self.dist.as_ref().expect("draw from an empty domain");
        self.points[dist.sample(rng)].0
    }

    fn weight(&self, x: u64) -> f64 {
        self.lookup.get(&x).copied().unwrap_or(0.0)
    }

    fn total_weight(&self) -> f64 {
        self.points.iter().map(|p| p.1).sum()
    }

    fn mass_f(&self, f: &FunctionSpec) -> f64 {
        self.points.iter().map(|p| f.eval(p.1)).sum()
    }
}

/// `h(x) = scale · p · (1 − p)^x` on `x = 0, 1, 2, …`.
#[derive(Debug, Clone)]
pub struct GeometricDomain {
    scale: f64,
    p: f64,
}

impl GeometricDomain {
    pub fn new(scale: f64, p: f64) -> Result<Self, MomentsError> {
        if !(scale > 0.0 && scale.is_finite() && p > 0.0 && p < 1.0) {
            return Err(MomentsError::InvalidParameter("geometric domain needs scale > 0 and p in (0, 1)".into()));
        }
        Ok(Self { scale, p })
    }
}

impl SampleableDomain for GeometricDomain {
    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        Geometric::new(self.p).expect("p in (0, 1)").sample(rng)
    }

    fn weight(&self, x: u64) -> f64 {
        self.scale * self.p * (1.0 - self.p).powf(x as f64)
    }

    fn total_weight(&self) -> f64 {
        self.scale
    }

    /// Summed until the weights underflow; requires `f(0) = 0`.
    fn mass_f(&self, f: &FunctionSpec) -> f64 {
        let mut total = 0.0;
        let mut x = 0;
        loop {
            let h = self.weight(x);
            let term = f.eval(h);
            total += term;
            if h == 0.0 || (term <= total * 1e-17 && x > 0) {
                return total;
            }
            x += 1;
        }
    }
}

#[derive(Clone)]
pub(crate) enum SumDown {
    Report,
    Draw(u64),
    Query { indices: Arc<Vec<u64>>, index_words: usize },
}

impl Payload for SumDown {
    fn words(&self) -> usize {
        match self {
            SumDown::Report => 0,
            SumDown::Draw(_) => 1,
            SumDown::Query { indices, index_words } => indices.len() * index_words,
        }
    }
}

pub(crate) enum SumUp {
    Masses(Vec<f64>),
    Samples(SampleBatch),
    Values(Vec<f64>),
}

impl Payload for SumUp {
    fn words(&self) -> usize {
        match self {
            SumUp::Masses(m) => m.len(),
            SumUp::Samples(b) => b.words(),
            SumUp::Values(v) => v.len(),
        }
    }
}

pub(crate) struct SumInput<'a, S: ?Sized> {
    pub source: &'a S,
    pub f: &'a FunctionSpec,
}

pub(crate) struct SumProtocol<'a, S: ?Sized> {
    servers: usize,
    l: u64,
    law: DrawLaw,
    index_words: usize,
    f: FunctionSpec,
    masses: Vec<f64>,
    normalizers: Vec<f64>,
    total: f64,
    sampled: BTreeMap<u64, u64>,
    query: Arc<Vec<u64>>,
    _source: PhantomData<&'a S>,
}

pub(crate) struct SumOutput {
    pub estimate: f64,
}

fn expect_masses(replies: Vec<(ServerId, SumUp)>) -> Result<Vec<Vec<f64>>, FabricError> {
    replies
        .into_iter()
        .map(|(id, up)| match up {
            SumUp::Masses(m) => Ok(m),
            _ => Err(FabricError::step_failed(id, "expected masses")),
        })
        .collect()
}

impl<'a, S: SumSource + ?Sized> Protocol for SumProtocol<'a, S> {
    type Input = SumInput<'a, S>;
    type Local = ();
    type Down = SumDown;
    type Up = SumUp;
    type Output = SumOutput;

    fn round_bound(&self) -> usize {
        3
    }

    fn coordinate(
        &mut self,
        done: usize,
        replies: Vec<(ServerId, SumUp)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Step<SumDown, SumOutput>, FabricError> {
        match done {
            0 => Ok(Step::broadcast(self.servers, SumDown::Report)),
            1 => {
                for m in expect_masses(replies)? {
                    self.masses.push(m[0]);
                    self.normalizers.push(m.get(1).copied().unwrap_or(m[0]));
                }
                self.total = self.masses.iter().sum();
                if self.total <= 0.0 {
                    return Ok(Step::Halt(SumOutput { estimate: 0.0 }));
                }
                let counts = multinomial(self.l, &self.masses, rng);
                Ok(Step::Send(
                    counts
                        .into_iter()
                        .enumerate()
                        .filter(|(_, c)| *c > 0)
                        .map(|(t, c)| Envelope {
                            to: t + 1,
                            payload: SumDown::Draw(c),
                        })
                        .collect(),
                ))
            }
            2 => {
                for (id, up) in replies {
                    let SumUp::Samples(batch) = up else {
                        return Err(FabricError::step_failed(id, "expected samples"));
                    };
                    for (x, c) in batch.counts {
                        *self.sampled.entry(x).or_default() += c;
                    }
                }
                self.query = Arc::new(self.sampled.keys().copied().collect());
                Ok(Step::broadcast(
                    self.servers,
                    SumDown::Query {
                        indices: Arc::clone(&self.query),
                        index_words: self.index_words,
                    },
                ))
            }
            _ => {
                let mut values = vec![Vec::new(); self.servers];
                for (id, up) in replies {
                    let SumUp::Values(v) = up else {
                        return Err(FabricError::step_failed(id, "expected values"));
                    };
                    if v.len() != self.query.len() {
                        return Err(FabricError::step_failed(id, "wrong number of values"));
                    }
                    values[id - 1] = v;
                }
                let mut acc = 0.0;
                for (pos, x) in self.query.iter().enumerate() {
                    let mut sum = 0.0;
                    let mut q = 0.0;
                    for t in 0..self.servers {
                        let v = values[t][pos];
                        sum += v;
                        let w = match self.law {
                            DrawLaw::FWeighted => self.f.eval(v),
                            DrawLaw::ValueWeighted => v,
                        };
                        if w > 0.0 {
                            q += (self.masses[t] / self.total) * w / self.normalizers[t];
                        }
                    }
                    if q <= 0.0 {
                        return Err(FabricError::step_failed(0, format!("sampled index {x} has zero probability")));
                    }
                    acc += self.sampled[x] as f64 * self.f.eval(sum) / q;
                }
                Ok(Step::Halt(SumOutput {
                    estimate: acc / self.l as f64,
                }))
            }
        }
    }

    fn serve(ctx: &mut ServerCtx<'_, SumInput<'a, S>, ()>, msg: &SumDown) -> Result<SumUp, FabricError> {
        let input = ctx.input();
        let (source, f) = (input.source, input.f);
        Ok(match msg {
            SumDown::Report => {
                let c = source.mass_f(f);
                match source.law() {
                    DrawLaw::FWeighted => SumUp::Masses(vec![c]),
                    DrawLaw::ValueWeighted => SumUp::Masses(vec![c, source.total_weight(f)]),
                }
            }
            SumDown::Draw(count) => SumUp::Samples(SampleBatch {
                counts: source.draw(*count, f, ctx.rng()),
                index_words: source.index_words(),
            }),
            SumDown::Query { indices, .. } => SumUp::Values(indices.iter().map(|x| source.value(*x)).collect()),
        })
    }
}

/// `l = ⌈factor · s · c_fs / ε²⌉`.
pub(crate) fn sum_sample_count(factor: f64, s: usize, c_fs: f64, eps: f64) -> u64 {
    (factor * s as f64 * c_fs / (eps * eps)).ceil().max(1.0) as u64
}

pub(crate) fn run_sum<S: SumSource + ?Sized>(
    sources: &[&S],
    f: &FunctionSpec,
    eps: f64,
    master_seed: u64,
    config: &MomentConfig,
) -> Result<MomentRun, MomentsError> {
    check_eps(eps)?;
    let s = sources.len();
    if s == 0 {
        return Err(MomentsError::NoServers);
    }
    let c_fs = f.c_fs().ok_or_else(|| MomentsError::MissingCfs(f.name().to_string()))?;
    f.validate(s)?;
    let l = sum_sample_count(config.sum_factor, s, c_fs, eps);
    let protocol = SumProtocol {
        servers: s,
        l,
        law: sources[0].law(),
        index_words: sources[0].index_words(),
        f: f.clone(),
        masses: Vec::new(),
        normalizers: Vec::new(),
        total: 0.0,
        sampled: BTreeMap::new(),
        query: Arc::new(Vec::new()),
        _source: PhantomData,
    };
    let inputs = sources.iter().map(|source| SumInput { source: *source, f }).collect();
    let outcome = run_protocol_with(protocol, inputs, master_seed, config.schedule)?;
    let samples = if outcome.ledger.rounds() > 1 { l as usize } else { 0 };
    Ok(MomentRun {
        estimate: outcome.output.estimate,
        ledger: outcome.ledger,
        phase: None,
        samples,
    })
}

/// Estimates `Σ_i f(Σ_t a_ti)` with `l = ⌈100·s·c_fs/ε²⌉` two-level samples
/// and the estimator `(B/l)·Σ_{i∈S} A_i/B_i`.
pub fn distributed_sum(
    input: &PartitionedVectors,
    f: &FunctionSpec,
    eps: f64,
    master_seed: u64,
    config: &MomentConfig,
) -> Result<MomentRun, MomentsError> {
    let sources: Vec<&[f64]> = input.vectors().iter().map(|v| v.as_slice()).collect();
    run_sum(&sources, f, eps, master_seed, config)
}

/// Estimates `Σ_x f(Σ_t h_t(x))` when server `t` can only draw from `h_t`.
/// A draw `x` is weighted by `1/q(x)` with `q(x) = Σ_t (C_t/B)·h_t(x)/W_t`.
pub fn distributed_sum_domains<D: SampleableDomain>(
    domains: &[D],
    f: &FunctionSpec,
    eps: f64,
    master_seed: u64,
    config: &MomentConfig,
) -> Result<MomentRun, MomentsError> {
    let wrapped: Vec<DomainSource<'_, D>> = domains.iter().map(DomainSource).collect();
    let sources: Vec<&DomainSource<'_, D>> = wrapped.iter().collect();
    run_sum(&sources, f, eps, master_seed, config)
}
