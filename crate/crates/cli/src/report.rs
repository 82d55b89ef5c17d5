use std::path::Path;
use std::time::Instant;

use distsketch::commsim::{CommLedger, Direction};
use distsketch::lowrank::{adaptive_compress, evaluate, LowRankError};
use distsketch::moments::{
    distributed_sum, exact_generalized_moment, exact_moment, frequency_moments, generalized_moment, lipschitz_moments,
    FunctionSpec, MomentRun, MomentsError,
};
use serde::{Deserialize, Serialize};

use crate::config::{Plan, ProtocolName};
use crate::data::{load_matrix, load_rows, load_vectors};
use crate::CliError;

pub const LOWRANK_SCHEMA: &str = include_str!("../schemas/lowrank.schema.json");
pub const MOMENTS_SCHEMA: &str = include_str!("../schemas/moments.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Traffic {
    pub rounds: usize,
    pub total_words: usize,
    pub words_cp_to_server: usize,
    pub words_server_to_cp: usize,
    pub words_by_round: Vec<usize>,
}

impl From<&CommLedger> for Traffic {
    fn from(l: &CommLedger) -> Self {
        Self {
            rounds: l.rounds(),
            total_words: l.total_words(),
            words_cp_to_server: l.words_in(Direction::CpToServer),
            words_server_to_cp: l.words_in(Direction::ServerToCp),
            words_by_round: l.summary().words_by_round,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowRankReport {
    pub protocol: String,
    pub seed: u64,
    pub servers: usize,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub eps: f64,
    pub bit_bounded: bool,
    pub sketch_rows: usize,
    pub embedding_rows: usize,
    pub rank: usize,
    #[serde(flatten)]
    pub traffic: Traffic,
    pub oracle: bool,
    pub error: Option<f64>,
    pub fk_oracle: Option<f64>,
    pub ratio: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentReport {
    pub protocol: String,
    pub seed: u64,
    pub servers: usize,
    pub n: usize,
    pub eps: f64,
    pub function: Option<String>,
    pub g: Option<String>,
    pub k: Option<usize>,
    pub estimate: f64,
    pub phase: Option<String>,
    pub samples: usize,
    #[serde(flatten)]
    pub traffic: Traffic,
    pub oracle: bool,
    pub exact: Option<f64>,
    pub rel_error: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Report {
    LowRank(LowRankReport),
    Moments(MomentReport),
}

impl Report {
    /// The quantity compared against `oracle_tolerance`.
    fn checked_value(&self) -> Option<f64> {
        match self {
            Report::LowRank(r) => r.ratio,
            Report::Moments(r) => r.rel_error,
        }
    }
}

fn lowrank_err(e: LowRankError) -> CliError {
    match e {
        LowRankError::Fabric(f) => CliError::Abort(f.to_string()),
        other => CliError::validation(other.to_string()),
    }
}

fn moments_err(e: MomentsError) -> CliError {
    match e {
        MomentsError::Fabric(f) => CliError::Abort(f.to_string()),
        other => CliError::validation(other.to_string()),
    }
}

fn rel_error(estimate: f64, exact: f64) -> f64 {
    if exact == 0.0 {
        if estimate == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (estimate - exact).abs() / exact.abs()
    }
}

fn run_lowrank(plan: &Plan) -> Result<Report, CliError> {
    let input = load_matrix(&plan.data, &plan.manifest)?;
    let k = plan.k.expect("validated");
    let start = Instant::now();
    let run = adaptive_compress(&input, k, plan.eps, plan.seed, &plan.lowrank).map_err(lowrank_err)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let quality = if plan.oracle {
        Some(evaluate(&input, &run.factors, k).map_err(lowrank_err)?)
    } else {
        None
    };
    Ok(Report::LowRank(LowRankReport {
        protocol: plan.protocol.name().into(),
        seed: plan.seed,
        servers: input.servers(),
        n: input.n(),
        d: input.d(),
        k,
        eps: plan.eps,
        bit_bounded: plan.lowrank.bit_bounded,
        sketch_rows: run.sketch_rows,
        embedding_rows: run.embedding_rows,
        rank: run.factors.rank_bound(),
        traffic: Traffic::from(&run.ledger),
        oracle: plan.oracle,
        error: quality.as_ref().map(|q| q.error),
        fk_oracle: quality.as_ref().map(|q| q.fk_oracle),
        ratio: quality.as_ref().map(|q| q.ratio),
        wall_ms,
    }))
}

fn run_moments(plan: &Plan) -> Result<Report, CliError> {
    let start = Instant::now();
    let (run, exact, function): (MomentRun, Option<f64>, Option<String>) = match plan.protocol {
        ProtocolName::Corr => {
            let rows = load_rows(&plan.data, &plan.manifest)?;
            let f = plan.function.as_ref().expect("validated");
            let g = plan.g.as_ref().expect("validated");
            let k = plan.k.expect("validated");
            let run = generalized_moment(&rows, f, g, k, plan.eps, plan.seed, &plan.moments).map_err(moments_err)?;
            let exact = if plan.oracle {
                Some(exact_generalized_moment(&rows, f, g, k).map_err(moments_err)?)
            } else {
                None
            };
            (run, exact, Some(f.name().to_string()))
        }
        protocol => {
            let input = load_vectors(&plan.data, &plan.manifest)?;
            let (run, f): (MomentRun, FunctionSpec) = match protocol {
                ProtocolName::Sum => {
                    let f = plan.function.clone().expect("validated");
                    (distributed_sum(&input, &f, plan.eps, plan.seed, &plan.moments).map_err(moments_err)?, f)
                }
                ProtocolName::Freq => {
                    let k = plan.k.expect("validated") as u32;
                    let run = frequency_moments(&input, k, plan.eps, plan.seed, &plan.moments).map_err(moments_err)?.0;
                    (run, FunctionSpec::power(k, input.servers()))
                }
                _ => {
                    let f = plan.function.clone().expect("validated");
                    (lipschitz_moments(&input, &f, plan.eps, plan.seed, &plan.moments).map_err(moments_err)?.0, f)
                }
            };
            let exact = plan.oracle.then(|| exact_moment(&input, &f));
            let name = (protocol != ProtocolName::Freq).then(|| f.name().to_string());
            (run, exact, name)
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let phase = run
        .phase
        .map(|p| serde_json::to_value(p).expect("phase serializes").as_str().unwrap_or_default().to_string());
    Ok(Report::Moments(MomentReport {
        protocol: plan.protocol.name().into(),
        seed: plan.seed,
        servers: plan.manifest.servers,
        n: plan.manifest.n,
        eps: plan.eps,
        function,
        g: plan.g_name.clone(),
        k: matches!(plan.protocol, ProtocolName::Freq | ProtocolName::Corr).then(|| plan.k.expect("validated")),
        estimate: run.estimate,
        phase,
        samples: run.samples,
        traffic: Traffic::from(&run.ledger),
        oracle: plan.oracle,
        exact,
        rel_error: exact.map(|e| rel_error(run.estimate, e)),
        wall_ms,
    }))
}

/// Runs the plan, writes the report, then applies the oracle check.
pub fn run_experiment(plan: &Plan) -> Result<Report, CliError> {
    let report = match plan.protocol {
        ProtocolName::LowRank => run_lowrank(plan)?,
        _ => run_moments(plan)?,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &plan.output {
        Some(path) => std::fs::write(path, &text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    if let (Some(tol), Some(value)) = (plan.oracle_tolerance, report.checked_value()) {
        if !(value <= tol) {
            return Err(CliError::Oracle(format!("checked value {value} exceeds tolerance {tol}")));
        }
    }
    Ok(report)
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(items) => items.iter().map(cell).collect::<Vec<_>>().join(";"),
        other => other.to_string(),
    }
}

/// One CSV row per report; columns are the union of fields in order of
/// first appearance, arrays joined with `;`.
pub fn aggregate_csv(paths: &[impl AsRef<Path>], out: impl std::io::Write) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
        let value: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
        for key in value.keys() {
            if !columns.contains(key) {
                columns.push(key.clone());
            }
        }
        rows.push(value);
    }
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| CliError::validation(e.to_string());
    w.write_record(&columns).map_err(io)?;
    for row in rows {
        w.write_record(columns.iter().map(|c| row.get(c).map(cell).unwrap_or_default())).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::validation(e.to_string()))
}
