use std::path::PathBuf;

use distsketch::commsim::Schedule;
use distsketch::lowrank::LowRankConfig;
use distsketch::moments::{FunctionSpec, GFunction, MomentConfig};
use serde::Deserialize;

use crate::data::{DataKind, Manifest};
use crate::CliError;

/// One experiment. Every field is optional here; flags fill gaps and win
/// over the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Option<String>,
    pub data: Option<PathBuf>,
    pub servers: Option<usize>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub k: Option<usize>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub function: Option<FunctionConfig>,
    pub g: Option<String>,
    pub lowrank: Option<LowRankConfig>,
    pub moments: Option<MomentConfig>,
    pub schedule: Option<String>,
    pub oracle: Option<bool>,
    pub oracle_tolerance: Option<f64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionConfig {
    pub name: String,
    pub exponent: Option<u32>,
    pub points: Option<Vec<(f64, f64)>>,
    pub c_fs: Option<f64>,
    pub lipschitz: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    /// Fills every field that `flags` sets.
    pub fn merge(mut self, flags: ExperimentConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if flags.$f.is_some() { self.$f = flags.$f; } )* };
        }
        take!(protocol, data, servers, n, d, k, eps, seed, function, g, lowrank, moments, schedule, oracle, oracle_tolerance, output);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolName {
    LowRank,
    Sum,
    Freq,
    Lip,
    Corr,
}

impl ProtocolName {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "lowrank" => Self::LowRank,
            "sum" => Self::Sum,
            "freq" => Self::Freq,
            "lip" => Self::Lip,
            "corr" => Self::Corr,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LowRank => "lowrank",
            Self::Sum => "sum",
            Self::Freq => "freq",
            Self::Lip => "lip",
            Self::Corr => "corr",
        }
    }

    fn data_kind(self) -> DataKind {
        match self {
            Self::LowRank => DataKind::Lowrank,
            Self::Corr => DataKind::Correlation,
            _ => DataKind::Moments,
        }
    }
}

/// A config that passed validation.
pub struct Plan {
    pub protocol: ProtocolName,
    pub data: PathBuf,
    pub manifest: Manifest,
    pub k: Option<usize>,
    pub eps: f64,
    pub seed: u64,
    pub function: Option<FunctionSpec>,
    pub g: Option<GFunction>,
    pub g_name: Option<String>,
    pub lowrank: LowRankConfig,
    pub moments: MomentConfig,
    pub oracle: bool,
    pub oracle_tolerance: Option<f64>,
    pub output: Option<PathBuf>,
}

fn build_function(fc: &FunctionConfig, s: usize, errors: &mut Vec<String>) -> Option<FunctionSpec> {
    let base = match fc.name.as_str() {
        "power" => match fc.exponent {
            Some(e) if e >= 1 => Some(FunctionSpec::power(e, s)),
            Some(e) => {
                errors.push(format!("function.exponent must be at least 1, got {e}"));
                None
            }
            None => {
                errors.push("function.exponent is required for power".into());
                None
            }
        },
        "x4+x5" => Some(FunctionSpec::quartic_plus_quintic(s)),
        "table" => match &fc.points {
            Some(points) => match FunctionSpec::table(points.clone(), fc.c_fs, fc.lipschitz) {
                Ok(f) => Some(f),
                Err(e) => {
                    errors.push(format!("function.points: {e}"));
                    None
                }
            },
            None => {
                errors.push("function.points is required for table".into());
                None
            }
        },
        other => {
            errors.push(format!("unknown function {other:?} (expected power, x4+x5 or table)"));
            None
        }
    }?;
    let mut f = base;
    if let Some(c) = fc.c_fs {
        f = f.with_c_fs(c);
    }
    if let Some(l) = fc.lipschitz {
        f = f.with_lipschitz(l);
    }
    Some(f)
}

impl ExperimentConfig {
    /// Checks everything and reports all failures at once.
    pub fn validate(&self) -> Result<Plan, CliError> {
        let mut errors = Vec::new();
        let protocol = match self.protocol.as_deref() {
            None => {
                errors.push("protocol is required".into());
                None
            }
            Some(p) => {
                let parsed = ProtocolName::parse(p);
                if parsed.is_none() {
                    errors.push(format!("unknown protocol {p:?} (expected lowrank, sum, freq, lip or corr)"));
                }
                parsed
            }
        };
        let manifest = match &self.data {
            None => {
                errors.push("data directory is required".into());
                None
            }
            Some(dir) => match Manifest::load(dir) {
                Ok(m) => Some(m),
                Err(e) => {
                    errors.push(e);
                    None
                }
            },
        };
        if let (Some(p), Some(m)) = (protocol, &manifest) {
            if p.data_kind() != m.kind {
                errors.push(format!("protocol {} needs {:?} data, found {:?}", p.name(), p.data_kind(), m.kind));
            }
            for (field, want, have) in [("servers", self.servers, m.servers), ("n", self.n, m.n), ("d", self.d, m.d)] {
                if let Some(w) = want {
                    if w != have {
                        errors.push(format!("{field} = {w} but the data has {have}"));
                    }
                }
            }
        }
        let eps = self.eps.unwrap_or(0.5);
        if !(eps > 0.0 && eps < 1.0) {
            errors.push(format!("eps must lie in (0, 1), got {eps}"));
        }
        let s = manifest.as_ref().map_or(1, |m| m.servers);
        let k = self.k;
        match (protocol, k) {
            (Some(ProtocolName::LowRank), None) => errors.push("k is required for lowrank".into()),
            (Some(ProtocolName::LowRank), Some(k)) => {
                if let Some(m) = &manifest {
                    if k == 0 || k > m.n.min(m.d) {
                        errors.push(format!("k = {k} must lie in [1, {}]", m.n.min(m.d)));
                    }
                }
            }
            (Some(ProtocolName::Freq), None) => errors.push("k is required for freq".into()),
            (Some(ProtocolName::Freq), Some(k)) if k < 2 => errors.push(format!("k must be at least 2 for freq, got {k}")),
            (Some(ProtocolName::Corr), None) => errors.push("k is required for corr".into()),
            (Some(ProtocolName::Corr), Some(k)) => {
                if let Some(m) = &manifest {
                    if k == 0 || k > m.n {
                        errors.push(format!("k = {k} must lie in [1, {}]", m.n));
                    }
                }
            }
            _ => {}
        }
        let default_fn = match protocol {
            Some(ProtocolName::Sum) => Some(FunctionConfig {
                name: "power".into(),
                exponent: Some(2),
                ..Default::default()
            }),
            Some(ProtocolName::Lip) => Some(FunctionConfig {
                name: "x4+x5".into(),
                ..Default::default()
            }),
            Some(ProtocolName::Corr) => Some(FunctionConfig {
                name: "power".into(),
                exponent: Some(1),
                ..Default::default()
            }),
            _ => None,
        };
        let function = match protocol {
            Some(ProtocolName::LowRank) | Some(ProtocolName::Freq) | None => {
                if self.function.is_some() {
                    errors.push("function is only used by sum, lip and corr".into());
                }
                None
            }
            _ => self.function.clone().or(default_fn).and_then(|fc| build_function(&fc, s, &mut errors)),
        };
        if let Some(f) = &function {
            if matches!(protocol, Some(ProtocolName::Sum) | Some(ProtocolName::Corr)) && f.c_fs().is_none() {
                errors.push(format!("function {} needs c_fs", f.name()));
            }
            if protocol == Some(ProtocolName::Lip) && f.lipschitz().is_none() {
                errors.push(format!("function {} needs lipschitz", f.name()));
            }
            if let Err(e) = f.validate(s) {
                errors.push(format!("function check failed: {e}"));
            }
        }
        let (g, g_name) = match (protocol, self.g.as_deref()) {
            (Some(ProtocolName::Corr), name) => {
                let name = name.unwrap_or("product");
                let g = match name {
                    "product" => Some(GFunction::Product),
                    "sum" => Some(GFunction::Sum),
                    "min" => Some(GFunction::Min),
                    other => {
                        errors.push(format!("unknown g {other:?} (expected product, sum or min)"));
                        None
                    }
                };
                (g, Some(name.to_string()))
            }
            (_, Some(_)) => {
                errors.push("g is only used by corr".into());
                (None, None)
            }
            _ => (None, None),
        };
        let schedule = match self.schedule.as_deref() {
            None | Some("parallel") => Schedule::Parallel,
            Some("sequential") => Schedule::Sequential,
            Some(other) => {
                errors.push(format!("unknown schedule {other:?} (expected parallel or sequential)"));
                Schedule::Parallel
            }
        };
        let mut lowrank = self.lowrank.clone().unwrap_or_default();
        lowrank.schedule = schedule;
        if !(lowrank.sketch_factor > 0.0 && lowrank.embedding_factor > 0.0) {
            errors.push("lowrank sketch and embedding factors must be positive".into());
        }
        let mut moments = self.moments.clone().unwrap_or_default();
        moments.schedule = schedule;
        let factors = [
            moments.sum_factor,
            moments.coarse_factor,
            moments.sample_factor,
            moments.subset_factor,
            moments.repetition_factor,
            moments.filter_factor,
        ];
        if factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            errors.push("moment constant factors must be positive and finite".into());
        }
        if let Some(t) = self.oracle_tolerance {
            if !(t >= 0.0) {
                errors.push(format!("oracle_tolerance must be nonnegative, got {t}"));
            }
        }
        if !errors.is_empty() {
            return Err(CliError::Validation(errors));
        }
        Ok(Plan {
            protocol: protocol.expect("validated"),
            data: self.data.clone().expect("validated"),
            manifest: manifest.expect("validated"),
            k,
            eps,
            seed: self.seed.unwrap_or(0),
            function,
            g,
            g_name,
            lowrank,
            moments,
            oracle: self.oracle.unwrap_or(false),
            oracle_tolerance: self.oracle_tolerance,
            output: self.output.clone(),
        })
    }
}
