//! End-to-end acceptance checks. Each prints one PASS/FAIL line; the binary
//! exits nonzero when any check fails.

use std::time::Instant;

use distsketch::commsim::{run_protocol, FabricError, Payload, Protocol, ServerCtx, ServerId, Step, Tagged};
use distsketch::instance::{exact_rank, moment_vectors, signal_plus_noise, split_signed_shares, MomentProfile};
use distsketch::linalg::{best_rank_k_error, numerical_rank, top_right_singular_vectors, DenseMatrix};
use distsketch::lowrank::{adaptive_compress, evaluate, LowRankConfig, PartitionedMatrix};
use distsketch::moments::{
    distinct_tuples, distributed_sum, exact_generalized_moment, exact_moment, frequency_moments, generalized_moment,
    guarded_ln, lipschitz_moments, lipschitz_ratio_bound, rejection_sample_tuple, tuple_weight, two_level_sample,
    FunctionSpec, GFunction, MomentConfig, PartitionedVectors, Phase,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn tv(counts: &[usize], probs: &[f64]) -> f64 {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .map(|(c, p)| (*c as f64 / total as f64 - p).abs())
        .sum::<f64>()
        / 2.0
}

fn noisy_instance(n: usize, d: usize, k: usize, s: usize, seed: u64) -> PartitionedMatrix {
    let target = signal_plus_noise(n, d, k, 10.0, 0.1, seed);
    split_signed_shares(&target, s, 1.0, seed.wrapping_add(1_000)).unwrap()
}

fn lowrank_accuracy() -> Verdict {
    let (n, d, k, s, eps) = (500, 40, 5, 4, 0.5);
    let start = Instant::now();
    let mut good = 0;
    let mut rank_ok = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let input = noisy_instance(n, d, k, s, seed);
        let run = adaptive_compress(&input, k, eps, seed, &LowRankConfig::default()).unwrap();
        let q = evaluate(&input, &run.factors, k).unwrap();
        worst = worst.max(q.ratio);
        if q.ratio <= 1.5 {
            good += 1;
        }
        if numerical_rank(&run.factors.implied_matrix().unwrap(), 1e-8) <= k {
            rank_ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        good >= 18 && rank_ok == 20 && secs < 30.0,
        format!("ratio <= 1.5 in {good}/20 (worst {worst:.4}), rank <= {k} in {rank_ok}/20, {secs:.1}s"),
    )
}

fn lowrank_exactness() -> Verdict {
    let (n, d, k, s, eps) = (500, 40, 5, 4, 0.5);
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let input = exact_rank(n, d, k, s, seed).unwrap();
        let run = adaptive_compress(&input, k, eps, seed, &LowRankConfig::default()).unwrap();
        let q = evaluate(&input, &run.factors, k).unwrap();
        worst = worst.max(q.ratio);
        if q.ratio <= 1.0 + 1e-6 {
            good += 1;
        }
    }
    verdict(good == 20, format!("ratio <= 1 + 1e-6 in {good}/20 (worst {worst})"))
}

fn lowrank_communication() -> Verdict {
    let (n, k, s, eps) = (500, 5, 4, 0.5);
    let cfg = LowRankConfig::default();
    let m_s = cfg.sketch_rows(k, eps);
    let m_p = cfg.embedding_rows(m_s, eps);
    let mut words = Vec::new();
    let mut budget_ok = true;
    let mut rounds_ok = true;
    for d in [20, 40, 80] {
        let input = noisy_instance(n, d, k, s, 7);
        let run = adaptive_compress(&input, k, eps, 7, &cfg).unwrap();
        let budget = 50 * (s * d * m_s + s * m_p * m_s + s * m_s * k + m_s * d);
        budget_ok &= run.ledger.total_words() <= budget;
        rounds_ok &= run.ledger.rounds() <= 4;
        words.push(run.ledger.total_words() as f64);
    }
    let ratios = [words[1] / words[0], words[2] / words[1]];
    let linear = ratios.iter().all(|r| (r - 2.0).abs() <= 0.4);
    verdict(
        budget_ok && rounds_ok && linear,
        format!(
            "budget {budget_ok}, rounds {rounds_ok}, words {:?} for d = 20/40/80, doubling ratios {:.3} and {:.3} (need 2 +- 0.4)",
            words, ratios[0], ratios[1]
        ),
    )
}

fn distributed_sum_check() -> Verdict {
    let (s, n, eps) = (5, 1000, 0.1);
    let input = PartitionedVectors::new(moment_vectors(MomentProfile::Uniform, s, n, 42)).unwrap();
    let f = FunctionSpec::power(2, s);
    let exact = exact_moment(&input, &f);
    let cfg = MomentConfig::default();
    let budget = 10.0 * (s * s) as f64 * f.c_fs().unwrap() / (eps * eps);
    let start = Instant::now();
    let mut within = 0;
    let mut sum = 0.0;
    let mut rounds_ok = true;
    let mut words_ok = true;
    let mut max_words = 0;
    for seed in 0..1000u64 {
        let run = distributed_sum(&input, &f, eps, seed, &cfg).unwrap();
        if seed < 100 && (run.estimate - exact).abs() <= 0.1 * exact {
            within += 1;
        }
        sum += run.estimate;
        rounds_ok &= run.ledger.rounds() <= 4;
        words_ok &= run.ledger.total_words() as f64 <= budget;
        max_words = max_words.max(run.ledger.total_words());
    }
    let secs = start.elapsed().as_secs_f64();
    let mean_err = (sum / 1000.0 - exact).abs() / exact;
    verdict(
        within >= 95 && mean_err <= 0.03 && rounds_ok && words_ok && secs < 60.0,
        format!(
            "within 0.1 in {within}/100, mean error {mean_err:.5}, rounds {rounds_ok}, max words {max_words} (budget {budget}), {secs:.1}s"
        ),
    )
}

fn sampling_marginals() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vectors: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..10).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..3.0) }).collect())
        .collect();
    let f2 = FunctionSpec::power(2, 3);
    let b: Vec<f64> = (0..10).map(|i| vectors.iter().map(|v| f2.eval(v[i])).sum()).collect();
    let total: f64 = b.iter().sum();
    let probs: Vec<f64> = b.iter().map(|x| x / total).collect();
    let mut hits = vec![0; 10];
    for _ in 0..100_000 {
        hits[two_level_sample(&vectors, &f2, &mut rng).unwrap().0] += 1;
    }
    let tv_two = tv(&hits, &probs);

    let w = DenseMatrix::from_fn(3, 6, |_, _| rng.random_range(0.0..2.0));
    let g = GFunction::Product;
    let tuples: Vec<Vec<usize>> = distinct_tuples(6, 2).collect();
    let masses: Vec<f64> = tuples.iter().map(|t| f2.eval(tuple_weight(&w, &g, t))).collect();
    let mass: f64 = masses.iter().sum();
    let probs: Vec<f64> = masses.iter().map(|m| m / mass).collect();
    let mut hits = vec![0; tuples.len()];
    for _ in 0..100_000 {
        let sample = rejection_sample_tuple(&w, &f2, &g, 2, &mut rng).unwrap();
        hits[tuples.iter().position(|t| *t == sample.tuple).unwrap()] += 1;
    }
    let tv_rej = tv(&hits, &probs);
    verdict(
        tv_two <= 0.02 && tv_rej <= 0.02,
        format!("two-level TV {tv_two:.4}, rejection TV {tv_rej:.4}"),
    )
}

fn generalized_moment_check() -> Verdict {
    let (n, k, s, eps) = (8, 2, 2, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<DenseMatrix> = (0..s).map(|_| DenseMatrix::from_fn(2, n, |_, _| rng.random_range(0.0..1.0))).collect();
    let f = FunctionSpec::power(2, s);
    let g = GFunction::Product;
    let pairs = distinct_tuples(n, k).count();
    let exact = exact_generalized_moment(&data, &f, &g, k).unwrap();
    let mut good = 0;
    let mut rounds_ok = true;
    for seed in 0..100 {
        let run = generalized_moment(&data, &f, &g, k, eps, seed, &MomentConfig::default()).unwrap();
        rounds_ok &= run.ledger.rounds() <= 5;
        if (run.estimate - exact).abs() <= 0.2 * exact {
            good += 1;
        }
    }
    verdict(
        pairs == 56 && good >= 80 && rounds_ok,
        format!("{pairs} ordered pairs, within 0.2 in {good}/100, rounds {rounds_ok}"),
    )
}

struct MomentTally {
    good: usize,
    runs: usize,
    rounds_ok: bool,
    words_ok: bool,
    max_words: usize,
    full: usize,
}

fn tally(exact: f64, budget: f64, seeds: u64, run: impl Fn(u64) -> distsketch::moments::MomentRun) -> MomentTally {
    let mut t = MomentTally {
        good: 0,
        runs: 0,
        rounds_ok: true,
        words_ok: true,
        max_words: 0,
        full: 0,
    };
    for seed in 0..seeds {
        let r = run(seed);
        t.runs += 1;
        if (r.estimate - exact).abs() <= 0.5 * exact {
            t.good += 1;
        }
        if r.phase == Some(Phase::Full) {
            t.full += 1;
        }
        t.rounds_ok &= r.ledger.rounds() <= 8;
        t.words_ok &= r.ledger.total_words() as f64 <= budget;
        t.max_words = t.max_words.max(r.ledger.total_words());
    }
    t
}

fn describe(name: &str, t: &MomentTally) -> String {
    format!(
        "{name}: within 0.5 in {}/{}, phase two in {}, rounds {}, max words {}",
        t.good, t.runs, t.full, t.rounds_ok, t.max_words
    )
}

fn frequency_moments_check() -> Verdict {
    let (k, s, n, eps) = (4u32, 5, 2000, 0.25);
    let cfg = MomentConfig::default();
    let f = FunctionSpec::power(k, s);
    let ln = guarded_ln(s);
    let budget = 100.0 * ((s as f64).powi(k as i32 - 1) + (s as f64).powi(3)) * (ln / eps).powi(3);
    let mut parts = Vec::new();
    let mut pass = true;
    for profile in [MomentProfile::Mixed, MomentProfile::Disjoint] {
        let input = PartitionedVectors::new(moment_vectors(profile, s, n, 3)).unwrap();
        let exact = exact_moment(&input, &f);
        let t = tally(exact, budget, 100, |seed| frequency_moments(&input, k, eps, seed, &cfg).unwrap().0);
        pass &= t.good >= 80 && t.rounds_ok && t.words_ok;
        parts.push(describe(profile.name(), &t));
    }
    let constant = PartitionedVectors::new(moment_vectors(MomentProfile::Constant, s, n, 3)).unwrap();
    let exact = exact_moment(&constant, &f);
    let exits = (0..100)
        .filter(|seed| {
            let r = frequency_moments(&constant, k, eps, *seed, &cfg).unwrap().0;
            r.phase == Some(Phase::Coarse) && (r.estimate - exact).abs() <= 1e-9 * exact
        })
        .count();
    pass &= exits == 100;
    verdict(pass, format!("{}; constant instance exact in phase one {exits}/100; budget {budget:.0}", parts.join("; ")))
}

fn lipschitz_check() -> Verdict {
    let (s, n, eps) = (4, 500, 0.25);
    let f = FunctionSpec::quartic_plus_quintic(s);
    let cfg = MomentConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for profile in [MomentProfile::Mixed, MomentProfile::Disjoint] {
        let input = PartitionedVectors::new(moment_vectors(profile, s, n, 8)).unwrap();
        let exact = exact_moment(&input, &f);
        let t = tally(exact, f64::INFINITY, 100, |seed| lipschitz_moments(&input, &f, eps, seed, &cfg).unwrap().0);
        pass &= t.good >= 80 && t.rounds_ok;
        parts.push(describe(profile.name(), &t));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut violations = 0;
    for (func, l, width) in [(f.clone(), 5.0, s), (FunctionSpec::power(3, 3), 3.0, 3)] {
        for _ in 0..1000 {
            let xs: Vec<f64> = (0..width).map(|_| rng.random_range(0.0..10.0)).collect();
            let lhs = func.eval(xs.iter().sum()) / xs.iter().map(|x| func.eval(*x)).sum::<f64>();
            if lhs > lipschitz_ratio_bound(&xs, l) * (1.0 + 1e-12) {
                violations += 1;
            }
        }
    }
    pass &= violations == 0;
    verdict(pass, format!("{}; ratio-bound violations {violations}/2000", parts.join("; ")))
}

#[derive(Clone)]
struct Peek(Tagged<f64>);

impl Payload for Peek {
    fn words(&self) -> usize {
        1
    }
}

struct Snoop;

impl Protocol for Snoop {
    type Input = ();
    type Local = ();
    type Down = Peek;
    type Up = f64;
    type Output = ();

    fn round_bound(&self) -> usize {
        1
    }

    fn coordinate(&mut self, done: usize, _: Vec<(ServerId, f64)>, _: &mut ChaCha8Rng) -> Result<Step<Peek, ()>, FabricError> {
        Ok(if done == 0 {
            Step::broadcast(2, Peek(Tagged::new(2, 1.0)))
        } else {
            Step::Halt(())
        })
    }

    fn serve(ctx: &mut ServerCtx<'_, (), ()>, msg: &Peek) -> Result<f64, FabricError> {
        ctx.read(&msg.0).copied()
    }
}

fn property_suites() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut linalg_bad = 0;
    for _ in 0..200 {
        let rows = rng.random_range(2..30);
        let cols = rng.random_range(2..12);
        let m = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let k = rng.random_range(1..=rows.min(cols));
        let v = top_right_singular_vectors(&m, k).unwrap();
        let gram = v.t_matmul(&v).unwrap();
        let proj = v.matmul(&v.transpose()).unwrap();
        let mv = m.matmul(&proj).unwrap();
        let resid = m.sub(&mv).unwrap();
        let total = m.frobenius_norm().powi(2);
        let split = mv.frobenius_norm().powi(2) + resid.frobenius_norm().powi(2);
        let fk = best_rank_k_error(&m, k).unwrap();
        if gram.max_abs_diff(&DenseMatrix::identity(k)) > 1e-10
            || proj.matmul(&proj).unwrap().max_abs_diff(&proj) > 1e-10
            || (total - split).abs() > 1e-8 * total
            || (resid.frobenius_norm() - fk).abs() > 1e-8 * m.frobenius_norm()
        {
            linalg_bad += 1;
        }
    }

    let mut fabric_bad = 0;
    for seed in 0..10 {
        let input = noisy_instance(60, 12, 3, 3, seed);
        let seq = LowRankConfig {
            schedule: distsketch::commsim::Schedule::Sequential,
            ..LowRankConfig::default()
        };
        let a = adaptive_compress(&input, 3, 0.5, seed, &LowRankConfig::default()).unwrap();
        let b = adaptive_compress(&input, 3, 0.5, seed, &LowRankConfig::default()).unwrap();
        let c = adaptive_compress(&input, 3, 0.5, seed, &seq).unwrap();
        for other in [&b, &c] {
            if other.ledger != a.ledger || other.factors.v.max_abs_diff(&a.factors.v) != 0.0 {
                fabric_bad += 1;
            }
        }
    }
    if !matches!(
        run_protocol(Snoop, vec![(), ()], 0),
        Err(FabricError::IsolationViolation { server: 1, owner: 2 })
    ) {
        fabric_bad += 1;
    }

    let mut moments_bad = 0;
    let mut checked = 0;
    for seed in 0..30u64 {
        let s = 2 + (seed % 4) as usize;
        let k = 2 + (seed % 3) as u32;
        let profile = MomentProfile::ALL[(seed % 5) as usize];
        let input = PartitionedVectors::new(moment_vectors(profile, s, 300, seed)).unwrap();
        let (_, diag) = frequency_moments(&input, k, 0.5, seed, &MomentConfig::default()).unwrap();
        let top = (s as f64).powi(k as i32 - 1);
        for r in &diag.exact_rho {
            checked += 1;
            if !(*r >= 1.0 - 1e-9 && *r <= top * (1.0 + 1e-9)) {
                moments_bad += 1;
            }
        }
        for (crude, b) in &diag.crude_pairs {
            checked += 1;
            if *crude > b * (1.0 + 1e-12) {
                moments_bad += 1;
            }
        }
    }
    verdict(
        linalg_bad == 0 && fabric_bad == 0 && moments_bad == 0,
        format!("linalg violations {linalg_bad}/200, fabric violations {fabric_bad}, moment violations {moments_bad}/{checked}"),
    )
}

fn main() {
    let checks: [(&str, fn() -> Verdict); 9] = [
        ("lowrank-accuracy", lowrank_accuracy),
        ("lowrank-exactness", lowrank_exactness),
        ("lowrank-communication", lowrank_communication),
        ("distributed-sum", distributed_sum_check),
        ("sampling-marginals", sampling_marginals),
        ("generalized-moment", generalized_moment_check),
        ("frequency-moments", frequency_moments_check),
        ("lipschitz-moments", lipschitz_check),
        ("property-suites", property_suites),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let v = check();
        println!(
            "acceptance {name}: {} ({}; {:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.pass);
    }
    println!("acceptance summary: {}/{} passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
