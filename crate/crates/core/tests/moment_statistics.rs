use distsketch::instance::{moment_vectors, MomentProfile};
use distsketch::moments::{
    c_fs_power, exact_moment, median_sum_estimate, two_level_sample, FunctionSpec, PartitionedVectors,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROFILES: [MomentProfile; 3] = [MomentProfile::Uniform, MomentProfile::Disjoint, MomentProfile::Mixed];

#[test]
fn single_sample_variance_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (s, k) in [(3usize, 2u32), (5, 2), (4, 3)] {
        for profile in PROFILES {
            let vectors = moment_vectors(profile, s, 200, 7);
            let f = FunctionSpec::power(k, s);
            let input = PartitionedVectors::new(vectors.clone()).unwrap();
            let a = exact_moment(&input, &f);
            let b_i: Vec<f64> = (0..200).map(|i| vectors.iter().map(|v| f.eval(v[i])).sum()).collect();
            let b: f64 = b_i.iter().sum();
            let draws = 50_000;
            let xs: Vec<f64> = (0..draws)
                .map(|_| {
                    let (i, _) = two_level_sample(&vectors, &f, &mut rng).unwrap();
                    b * f.eval(vectors.iter().map(|v| v[i]).sum()) / b_i[i]
                })
                .collect();
            let mean = xs.iter().sum::<f64>() / draws as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            assert!(var <= 1.1 * c_fs_power(k, s) * s as f64 * a * a, "{profile:?} s={s} k={k}");
        }
    }
}

#[test]
fn crude_value_tail_is_at_most_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (s, k) in [(3usize, 2u32), (5, 4), (8, 3)] {
        let delta = 1.0 / (10.0 * (s as f64).ln());
        for profile in PROFILES {
            let vectors = moment_vectors(profile, s, 300, 9);
            let f = FunctionSpec::power(k, s);
            let draws = 50_000;
            let mut tiny = 0;
            for _ in 0..draws {
                let (i, t) = two_level_sample(&vectors, &f, &mut rng).unwrap();
                let b_i: f64 = vectors.iter().map(|v| f.eval(v[i])).sum();
                let crude = f.eval(vectors[t - 1][i]);
                assert!(crude <= b_i);
                if crude <= delta * b_i / s as f64 {
                    tiny += 1;
                }
            }
            let rate = tiny as f64 / draws as f64;
            assert!(rate <= delta, "{profile:?} s={s} k={k}: {rate} > {delta}");
        }
    }
}

#[test]
fn median_estimate_failure_rate_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for (s, k, eps) in [(4usize, 2u32, 0.5f64), (5, 3, 0.5), (3, 4, 0.25), (6, 2, 0.25)] {
        let f = FunctionSpec::power(k, s);
        let reps = (4.0 * (k as f64 * (s as f64).ln() + (1.0 / eps).ln())).ceil() as usize;
        let bound = eps * eps / (s as f64).powi(k as i32);
        for _ in 0..5 {
            let column: Vec<f64> = (0..s).map(|_| rng.random_range(0.5..2.0)).collect();
            let total: f64 = column.iter().sum();
            let rho = f.eval(total) / column.iter().map(|x| f.eval(*x)).sum::<f64>();
            let top = (s as f64).powi(k as i32 - 1);
            let steps = ((top / rho).ln() / eps).ceil();
            let beta = top * (-steps * eps).exp();
            assert!(beta <= rho * (1.0 + 1e-12));
            let l = (top / beta).ceil() as u64;
            let trials = 20_000;
            let misses = (0..trials)
                .filter(|_| {
                    let est = median_sum_estimate(&column, l, reps, &f, &mut rng);
                    (est.powf(1.0 / k as f64) - total).abs() > eps * total
                })
                .count();
            let allowed = bound * trials as f64 + 3.0 * (trials as f64 * bound * (1.0 - bound)).sqrt();
            if misses as f64 > allowed.max(3.0) {
                failures.push(format!("s={s} k={k} eps={eps} rho={rho:.3} l={l}: {misses}/{trials} misses, allowed {allowed:.1}"));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
