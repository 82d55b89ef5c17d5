//! Per-server data directories: `manifest.json` plus one `server_<t>.csv`
//! per server (a matrix for lowrank and correlation data, a single column
//! for moments data).

use std::path::{Path, PathBuf};

use distsketch::instance::{exact_rank, incidence_rows, moment_vectors, signal_plus_noise, split_signed_shares, MomentProfile};
use distsketch::linalg::{read_csv, write_csv, DenseMatrix};
use distsketch::lowrank::PartitionedMatrix;
use distsketch::moments::PartitionedVectors;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Lowrank,
    Moments,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LowRankMode {
    /// Signal plus noise, rows dealt round-robin to servers.
    SignalNoise,
    /// Signal plus noise with every entry split into signed shares.
    Split,
    /// Exact rank, random additive shares.
    ExactRank,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: DataKind,
    pub servers: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub params: serde_json::Value,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, String> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        for f in &m.files {
            if !dir.join(f).is_file() {
                return Err(format!("{}: missing data file {f}", dir.display()));
            }
        }
        if m.files.len() != m.servers {
            return Err(format!("{}: {} files for {} servers", path.display(), m.files.len(), m.servers));
        }
        Ok(m)
    }
}

fn file_name(t: usize) -> String {
    format!("server_{t}.csv")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::validation(format!("{}: {e}", path.display()))
}

fn write_all(dir: &Path, manifest: &Manifest, blocks: &[DenseMatrix]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, block) in manifest.files.iter().zip(blocks) {
        let path = dir.join(name);
        write_csv(block, &path).map_err(|e| io_err(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

fn manifest(kind: DataKind, servers: usize, n: usize, d: usize, seed: u64, params: serde_json::Value) -> Manifest {
    Manifest {
        kind,
        servers,
        n,
        d,
        seed,
        params,
        files: (1..=servers).map(file_name).collect(),
    }
}

fn check(cond: bool, msg: impl Into<String>, errors: &mut Vec<String>) {
    if !cond {
        errors.push(msg.into());
    }
}

pub struct LowRankGen {
    pub mode: LowRankMode,
    pub servers: usize,
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    pub signal: f64,
    pub noise: f64,
    pub share_scale: f64,
}

/// The matrix a signal-noise or split directory sums to.
pub fn lowrank_target(g: &LowRankGen, seed: u64) -> DenseMatrix {
    signal_plus_noise(g.n, g.d, g.rank, g.signal, g.noise, seed)
}

pub fn generate_lowrank(dir: &Path, g: &LowRankGen, seed: u64) -> Result<PathBuf, CliError> {
    let mut errors = Vec::new();
    check(g.servers >= 1, "servers must be at least 1", &mut errors);
    check(g.n >= 1 && g.d >= 1, "n and d must be positive", &mut errors);
    check(g.rank >= 1 && g.rank <= g.n.min(g.d), format!("rank must lie in [1, min(n, d)], got {}", g.rank), &mut errors);
    check(g.signal >= 0.0 && g.noise >= 0.0 && g.share_scale >= 0.0, "signal, noise and share scale must be nonnegative", &mut errors);
    if !errors.is_empty() {
        return Err(CliError::Validation(errors));
    }
    let blocks = match g.mode {
        LowRankMode::SignalNoise => {
            let target = lowrank_target(g, seed);
            (0..g.servers)
                .map(|t| DenseMatrix::from_fn(g.n, g.d, |i, j| if i % g.servers == t { target.get(i, j) } else { 0.0 }))
                .collect()
        }
        LowRankMode::Split => split_signed_shares(&lowrank_target(g, seed), g.servers, g.share_scale, seed ^ 0x5eed)
            .map_err(|e| CliError::validation(e.to_string()))?
            .blocks()
            .to_vec(),
        LowRankMode::ExactRank => exact_rank(g.n, g.d, g.rank, g.servers, seed)
            .map_err(|e| CliError::validation(e.to_string()))?
            .blocks()
            .to_vec(),
    };
    let params = serde_json::json!({
        "mode": g.mode,
        "rank": g.rank,
        "signal": g.signal,
        "noise": g.noise,
        "share_scale": g.share_scale,
    });
    write_all(dir, &manifest(DataKind::Lowrank, g.servers, g.n, g.d, seed, params), &blocks)?;
    Ok(dir.to_path_buf())
}

pub fn generate_moments(dir: &Path, profile: MomentProfile, servers: usize, n: usize, seed: u64) -> Result<PathBuf, CliError> {
    let mut errors = Vec::new();
    check(servers >= 1, "servers must be at least 1", &mut errors);
    check(n >= 1, "n must be positive", &mut errors);
    if !errors.is_empty() {
        return Err(CliError::Validation(errors));
    }
    let blocks: Vec<DenseMatrix> = moment_vectors(profile, servers, n, seed)
        .into_iter()
        .map(|v| DenseMatrix::from_row_major(n, 1, v).expect("column shape"))
        .collect();
    let params = serde_json::json!({ "profile": profile });
    write_all(dir, &manifest(DataKind::Moments, servers, n, 1, seed, params), &blocks)?;
    Ok(dir.to_path_buf())
}

pub fn generate_correlation(dir: &Path, servers: usize, rows: usize, n: usize, density: f64, seed: u64) -> Result<PathBuf, CliError> {
    let mut errors = Vec::new();
    check(servers >= 1, "servers must be at least 1", &mut errors);
    check(rows >= 1 && n >= 1, "rows and n must be positive", &mut errors);
    check((0.0..=1.0).contains(&density), format!("density must lie in [0, 1], got {density}"), &mut errors);
    if !errors.is_empty() {
        return Err(CliError::Validation(errors));
    }
    let blocks = incidence_rows(servers, rows, n, density, seed);
    let params = serde_json::json!({ "rows": rows, "density": density });
    write_all(dir, &manifest(DataKind::Correlation, servers, n, rows, seed, params), &blocks)?;
    Ok(dir.to_path_buf())
}

fn read_blocks(dir: &Path, m: &Manifest) -> Result<Vec<DenseMatrix>, CliError> {
    m.files
        .iter()
        .map(|f| {
            let path = dir.join(f);
            read_csv(&path).map_err(|e| io_err(&path, e))
        })
        .collect()
}

pub fn load_matrix(dir: &Path, m: &Manifest) -> Result<PartitionedMatrix, CliError> {
    PartitionedMatrix::new(read_blocks(dir, m)?).map_err(|e| CliError::validation(e.to_string()))
}

pub fn load_vectors(dir: &Path, m: &Manifest) -> Result<PartitionedVectors, CliError> {
    let vectors = read_blocks(dir, m)?.into_iter().map(|b| b.into_vec()).collect();
    PartitionedVectors::new(vectors).map_err(|e| CliError::validation(e.to_string()))
}

pub fn load_rows(dir: &Path, m: &Manifest) -> Result<Vec<DenseMatrix>, CliError> {
    read_blocks(dir, m)
}
