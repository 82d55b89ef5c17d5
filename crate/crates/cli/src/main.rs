mod config;
mod data;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use distsketch::instance::MomentProfile;

use config::ExperimentConfig;
use data::{LowRankGen, LowRankMode};

#[derive(Debug)]
pub enum CliError {
    Validation(Vec<String>),
    Abort(String),
    Oracle(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Abort(_) => 3,
            CliError::Oracle(_) => 4,
        }
    }

    fn print(&self) {
        match self {
            CliError::Validation(errors) => {
                for e in errors {
                    eprintln!("error: {e}");
                }
            }
            CliError::Abort(e) => eprintln!("protocol aborted: {e}"),
            CliError::Oracle(e) => eprintln!("oracle check failed: {e}"),
        }
    }
}

/// Communication-metered distributed low-rank approximation and moment
/// estimation over simulated servers.
#[derive(Parser)]
#[command(name = "distsketch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic per-server instance to a directory.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Run the distributed low-rank protocol.
    Lowrank(RunArgs),
    /// Run a moment estimation protocol.
    Moments {
        #[command(subcommand)]
        which: MomentCommand,
    },
    /// Aggregate JSON reports into a CSV table, or pretty-print them.
    Report {
        reports: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Pretty-print each report instead.
        #[arg(long)]
        pretty: bool,
    },
    /// Print the JSON schema of a report family.
    Schema { family: SchemaFamily },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaFamily {
    Lowrank,
    Moments,
}

#[derive(Subcommand)]
enum MomentCommand {
    /// Σ_i f(Σ_t a_ti) for f with a known c_fs.
    Sum(RunArgs),
    /// Σ_i (Σ_t a_ti)^k.
    Freq(RunArgs),
    /// Σ_i f(Σ_t a_ti) for f with a known log-log Lipschitz exponent.
    Lip(RunArgs),
    /// Generalized correlation over distinct k-tuples.
    Corr(RunArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    servers: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Function name: power, x4+x5 or table.
    #[arg(long)]
    function: Option<String>,
    /// Exponent for the power function.
    #[arg(long)]
    exponent: Option<u32>,
    /// Tuple score: product, sum or min.
    #[arg(long)]
    g: Option<String>,
    /// parallel or sequential.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    bit_bounded: bool,
    /// Compute exact values from the materialized input.
    #[arg(long)]
    oracle: bool,
    /// Exit with code 4 when the ratio or relative error exceeds this.
    #[arg(long)]
    oracle_tolerance: Option<f64>,
    /// Report path; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenKind {
    Lowrank {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "signal-noise")]
        mode: LowRankMode,
        #[arg(long, default_value_t = 4)]
        servers: usize,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 40)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        rank: usize,
        #[arg(long, default_value_t = 10.0)]
        signal: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        share_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Moments {
        #[arg(long)]
        out: PathBuf,
        /// disjoint, shared-heavy, uniform, constant or mixed.
        #[arg(long, default_value = "mixed")]
        profile: String,
        #[arg(long, default_value_t = 4)]
        servers: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Correlation {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        servers: usize,
        /// Rows held by each server.
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn experiment(protocol: &str, args: RunArgs) -> Result<(), CliError> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let function = match (args.function, args.exponent) {
        (None, None) => None,
        (name, exponent) => Some(config::FunctionConfig {
            name: name.unwrap_or_else(|| "power".into()),
            exponent,
            ..Default::default()
        }),
    };
    let mut lowrank = base.lowrank.clone();
    if args.bit_bounded {
        lowrank.get_or_insert_with(Default::default).bit_bounded = true;
    }
    let flags = ExperimentConfig {
        protocol: Some(protocol.into()),
        data: args.data,
        servers: args.servers,
        n: args.n,
        d: args.d,
        k: args.k,
        eps: args.eps,
        seed: args.seed,
        function,
        g: args.g,
        lowrank,
        moments: None,
        schedule: args.schedule,
        oracle: args.oracle.then_some(true),
        oracle_tolerance: args.oracle_tolerance,
        output: args.output,
    };
    let plan = base.merge(flags).validate()?;
    report::run_experiment(&plan).map(|_| ())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { kind } => {
            let dir = match kind {
                GenKind::Lowrank {
                    out,
                    mode,
                    servers,
                    n,
                    d,
                    rank,
                    signal,
                    noise,
                    share_scale,
                    seed,
                } => data::generate_lowrank(
                    &out,
                    &LowRankGen {
                        mode,
                        servers,
                        n,
                        d,
                        rank,
                        signal,
                        noise,
                        share_scale,
                    },
                    seed,
                )?,
                GenKind::Moments {
                    out,
                    profile,
                    servers,
                    n,
                    seed,
                } => {
                    let p = MomentProfile::parse(&profile).ok_or_else(|| {
                        CliError::validation(format!(
                            "unknown profile {profile:?} (expected disjoint, shared-heavy, uniform, constant or mixed)"
                        ))
                    })?;
                    data::generate_moments(&out, p, servers, n, seed)?
                }
                GenKind::Correlation {
                    out,
                    servers,
                    rows,
                    n,
                    density,
                    seed,
                } => data::generate_correlation(&out, servers, rows, n, density, seed)?,
            };
            println!("{}", dir.display());
            Ok(())
        }
        Command::Lowrank(args) => experiment("lowrank", args),
        Command::Moments { which } => match which {
            MomentCommand::Sum(a) => experiment("sum", a),
            MomentCommand::Freq(a) => experiment("freq", a),
            MomentCommand::Lip(a) => experiment("lip", a),
            MomentCommand::Corr(a) => experiment("corr", a),
        },
        Command::Report { reports, csv, pretty } => {
            if reports.is_empty() {
                return Err(CliError::validation("no reports given"));
            }
            if pretty {
                for p in &reports {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
                    let value: serde_json::Value =
                        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
                    println!("{}", serde_json::to_string_pretty(&value).expect("value serializes"));
                }
                return Ok(());
            }
            match csv {
                Some(path) => {
                    let file = std::fs::File::create(&path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
                    report::aggregate_csv(&reports, file)
                }
                None => report::aggregate_csv(&reports, std::io::stdout().lock()),
            }
        }
        Command::Schema { family } => {
            print!(
                "{}",
                match family {
                    SchemaFamily::Lowrank => report::LOWRANK_SCHEMA,
                    SchemaFamily::Moments => report::MOMENTS_SCHEMA,
                }
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.print();
            ExitCode::from(e.code())
        }
    }
}
