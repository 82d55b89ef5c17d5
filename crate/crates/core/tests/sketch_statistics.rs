use distsketch::instance::signal_plus_noise;
use distsketch::linalg::{best_rank_k_error, top_right_singular_vectors, DenseMatrix};
use distsketch::SketchSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn norm(v: &DenseMatrix) -> f64 {
    v.frobenius_norm()
}

#[test]
fn embedding_distortion_stays_within_one_plus_two_eps() {
    let (n, d, eps) = (500, 10, 0.5);
    let m = (4.0 * d as f64 / (eps * eps)).ceil() as usize;
    let mut good = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(n, d, &mut rng);
        let s = SketchSeed::generate(m, n, d, seed).unwrap();
        let sa = s.apply_left(&a).unwrap();
        let mut worst: f64 = 1.0;
        for _ in 0..100 {
            let x = gaussian(d, 1, &mut rng);
            let x = x.scaled(1.0 / norm(&x));
            let ratio = norm(&sa.matmul(&x).unwrap()) / norm(&a.matmul(&x).unwrap());
            worst = worst.max(ratio).max(1.0 / ratio);
        }
        if worst <= 1.0 + 2.0 * eps {
            good += 1;
        }
    }
    assert!(good >= 95, "{good}/100 seeds within 1 + 2 eps");
}

#[test]
fn projecting_onto_sketched_top_vectors_is_near_optimal() {
    let (n, d, k, eps) = (200, 20, 3, 0.5);
    let m = (4.0 * d as f64 / (eps * eps)).ceil() as usize;
    let mut good = 0;
    for seed in 0..100u64 {
        let a = signal_plus_noise(n, d, k, 10.0, 1.0, seed);
        let p = SketchSeed::generate(m, n, k + 4, seed ^ 0xabc).unwrap();
        let v = top_right_singular_vectors(&p.apply_left(&a).unwrap(), k).unwrap();
        let proj = a.matmul(&v).unwrap().matmul(&v.transpose()).unwrap();
        let err = a.sub(&proj).unwrap().frobenius_norm();
        if err <= (1.0 + 5.0 * eps) * best_rank_k_error(&a, k).unwrap() {
            good += 1;
        }
    }
    assert!(good >= 90, "{good}/100 seeds within 1 + 5 eps");
}
