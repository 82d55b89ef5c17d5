//! Seeded synthetic inputs for both problem families.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;
use crate::lowrank::{LowRankError, PartitionedMatrix};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `σ_signal·X·Y/√rank + σ_noise·G` with Gaussian `X` (`n × rank`), `Y`
/// (`rank × d`) and `G`, so signal entries have standard deviation `σ_signal`.
pub fn signal_plus_noise(n: usize, d: usize, rank: usize, signal: f64, noise: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(n, rank, &mut rng);
    let y = gaussian(rank, d, &mut rng).scaled(signal / (rank.max(1) as f64).sqrt());
    let mut a = x.matmul(&y).expect("inner dimensions agree");
    a.add_assign(&gaussian(n, d, &mut rng).scaled(noise)).expect("same shape");
    a
}

/// Splits every entry of `target` into `servers` signed shares: the first
/// `s − 1` are Gaussian with standard deviation `share_scale`, the last
/// closes the sum.
pub fn split_signed_shares(
    target: &DenseMatrix,
    servers: usize,
    share_scale: f64,
    seed: u64,
) -> Result<PartitionedMatrix, LowRankError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = target.shape();
    let mut blocks: Vec<DenseMatrix> = (0..servers).map(|_| DenseMatrix::zeros(n, d)).collect();
    if let Some((last, rest)) = blocks.split_last_mut() {
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for b in rest.iter_mut() {
                    let share: f64 = share_scale * rng.sample::<f64, _>(StandardNormal);
                    b.set(i, j, share);
                    acc += share;
                }
                last.set(i, j, target.get(i, j) - acc);
            }
        }
    }
    PartitionedMatrix::new(blocks)
}

/// Blocks `Xᵗ·Y` sharing one Gaussian `rank × d` row space `Y`, so `A` and
/// every block have rank at most `rank`.
pub fn exact_rank(n: usize, d: usize, rank: usize, servers: usize, seed: u64) -> Result<PartitionedMatrix, LowRankError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = gaussian(rank, d, &mut rng);
    let blocks = (0..servers)
        .map(|_| gaussian(n, rank, &mut rng).matmul(&y).expect("inner dimensions agree"))
        .collect();
    PartitionedMatrix::new(blocks)
}

/// Nonnegative per-server vector profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentProfile {
    /// Each index lives on exactly one server.
    Disjoint,
    /// Light disjoint background plus a few indices that every server holds with large values.
    SharedHeavy,
    /// Every server holds every index with a uniform value.
    Uniform,
    /// Every entry equals 1.
    Constant,
    /// Half the indices disjoint, half shared by all servers.
    Mixed,
}

impl MomentProfile {
    pub const ALL: [MomentProfile; 5] = [
        MomentProfile::Disjoint,
        MomentProfile::SharedHeavy,
        MomentProfile::Uniform,
        MomentProfile::Constant,
        MomentProfile::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MomentProfile::Disjoint => "disjoint",
            MomentProfile::SharedHeavy => "shared-heavy",
            MomentProfile::Uniform => "uniform",
            MomentProfile::Constant => "constant",
            MomentProfile::Mixed => "mixed",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// `servers` nonnegative vectors of length `n`.
pub fn moment_vectors(profile: MomentProfile, servers: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![vec![0.0; n]; servers];
    if servers == 0 {
        return out;
    }
    let heavy = (n / 100).max(1);
    for i in 0..n {
        match profile {
            MomentProfile::Disjoint => {
                let t = rng.random_range(0..servers);
                out[t][i] = rng.random_range(1.0..10.0);
            }
            MomentProfile::SharedHeavy => {
                if i < heavy {
                    for v in out.iter_mut() {
                        v[i] = rng.random_range(5.0..10.0);
                    }
                } else {
                    let t = rng.random_range(0..servers);
                    out[t][i] = rng.random_range(0.0..1.0);
                }
            }
            MomentProfile::Uniform => {
                for v in out.iter_mut() {
                    v[i] = rng.random_range(0.0..1.0);
                }
            }
            MomentProfile::Constant => {
                for v in out.iter_mut() {
                    v[i] = 1.0;
                }
            }
            MomentProfile::Mixed => {
                if rng.random_bool(0.5) {
                    let t = rng.random_range(0..servers);
                    out[t][i] = rng.random_range(0.0..1.0);
                } else {
                    for v in out.iter_mut() {
                        v[i] = rng.random_range(0.0..1.0);
                    }
                }
            }
        }
    }
    out
}

/// Per-server sets `W_t` of 0/1 incidence rows over `n` coordinates, each
/// entry set with probability `density`.
pub fn incidence_rows(servers: usize, rows_per_server: usize, n: usize, density: f64, seed: u64) -> Vec<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..servers)
        .map(|_| DenseMatrix::from_fn(rows_per_server, n, |_, _| if rng.random_bool(density) { 1.0 } else { 0.0 }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;

    #[test]
    fn signed_shares_sum_to_target() {
        let target = signal_plus_noise(30, 8, 2, 10.0, 0.1, 4);
        let parts = split_signed_shares(&target, 5, 3.0, 9).unwrap();
        assert!(parts.materialize().max_abs_diff(&target) <= 1e-12);
        assert!(parts.blocks()[0].as_slice().iter().any(|v| *v < 0.0));
    }

    #[test]
    fn exact_rank_blocks_share_row_space() {
        let parts = exact_rank(40, 12, 3, 4, 1).unwrap();
        assert_eq!(numerical_rank(&parts.materialize(), 1e-10), 3);
        for b in parts.blocks() {
            assert!(numerical_rank(b, 1e-10) <= 3);
        }
    }

    #[test]
    fn disjoint_profile_has_disjoint_supports() {
        let v = moment_vectors(MomentProfile::Disjoint, 3, 200, 5);
        for i in 0..200 {
            assert_eq!(v.iter().filter(|a| a[i] > 0.0).count(), 1);
        }
    }

    #[test]
    fn profiles_are_nonnegative_and_deterministic() {
        for p in MomentProfile::ALL {
            let a = moment_vectors(p, 4, 300, 11);
            assert_eq!(a, moment_vectors(p, 4, 300, 11));
            assert!(a.iter().flatten().all(|x| *x >= 0.0));
            assert_eq!(MomentProfile::parse(p.name()), Some(p));
        }
    }
}
