//! Command-line surface for stream generation, adaptation runs, report
//! comparison, and checkpoint inspection.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmtta::cli::{self, ConfigOverrides, RunArgs};
use mmtta::config::{ResponsibilitySource, UnimodalPosteriorSource};
use mmtta::fusion::BalanceSign;

#[derive(Parser)]
#[command(name = "mmtta", version, about = "Streaming Gaussian-discriminant engine for multi-modal test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a feature-stream file from a scenario spec.
    Gen {
        /// Scenario spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output stream file (MMTTA1).
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV export for inspection.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the adaptation engine over a stream.
    Run {
        /// Scenario spec (JSON); defines the source model and, without
        /// --stream, the generated target stream.
        #[arg(long)]
        scenario: PathBuf,
        /// Run configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pre-generated stream file (MMTTA1).
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Output directory for all run artifacts.
        #[arg(long)]
        out_dir: PathBuf,
        /// Write per-perspective covariance-deviation dumps.
        #[arg(long)]
        dump_cov: bool,
        /// Include per-batch partition counts in the metrics records.
        #[arg(long)]
        trace_partition: bool,
        #[command(flatten)]
        overrides: OverrideFlags,
    },
    /// Compare run reports in a table.
    Eval {
        /// Report files to compare; deltas are against the first.
        reports: Vec<PathBuf>,
        /// Also write the comparison as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print a readable summary of a bank checkpoint.
    DumpBank {
        /// Checkpoint file (GDABANK1).
        bank: PathBuf,
    },
}

/// Flags mirroring the config fields; each one overrides the config file.
#[derive(Args)]
struct OverrideFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    w_c: Option<f64>,
    #[arg(long)]
    w_g: Option<f64>,
    #[arg(long)]
    w_ra: Option<f64>,
    #[arg(long)]
    w_bal: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epsilon_shrink: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    source_samples: Option<usize>,
    #[arg(long, value_parser = parse_responsibility_source)]
    responsibility_source: Option<ResponsibilitySource>,
    #[arg(long, value_parser = parse_unimodal_source)]
    unimodal_posterior_source: Option<UnimodalPosteriorSource>,
    #[arg(long, value_parser = parse_balance_sign)]
    balance_sign: Option<BalanceSign>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_responsibility_source(s: &str) -> Result<ResponsibilitySource, String> {
    match s {
        "source_logits" => Ok(ResponsibilitySource::SourceLogits),
        "fused_posterior" => Ok(ResponsibilitySource::FusedPosterior),
        _ => Err("expected source_logits or fused_posterior".to_string()),
    }
}

fn parse_unimodal_source(s: &str) -> Result<UnimodalPosteriorSource, String> {
    match s {
        "gda" => Ok(UnimodalPosteriorSource::Gda),
        "head" => Ok(UnimodalPosteriorSource::Head),
        _ => Err("expected gda or head".to_string()),
    }
}

fn parse_balance_sign(s: &str) -> Result<BalanceSign, String> {
    match s {
        "literal" => Ok(BalanceSign::Literal),
        "flipped" => Ok(BalanceSign::Flipped),
        _ => Err("expected literal or flipped".to_string()),
    }
}

impl From<OverrideFlags> for ConfigOverrides {
    fn from(f: OverrideFlags) -> Self {
        ConfigOverrides {
            batch_size: f.batch_size,
            lambda: f.lambda,
            w_c: f.w_c,
            w_g: f.w_g,
            w_ra: f.w_ra,
            w_bal: f.w_bal,
            alpha: f.alpha,
            tau: f.tau,
            epsilon_shrink: f.epsilon_shrink,
            learning_rate: f.learning_rate,
            feature_dim: f.feature_dim,
            source_samples: f.source_samples,
            responsibility_source: f.responsibility_source,
            unimodal_posterior_source: f.unimodal_posterior_source,
            balance_sign: f.balance_sign,
            seed: f.seed,
        }
    }
}

fn run(cli: Cli) -> mmtta::Result<()> {
    match cli.command {
        Command::Gen { spec, out, csv } => cli::cmd_gen(&spec, &out, csv.as_deref()),
        Command::Run {
            scenario,
            config,
            stream,
            out_dir,
            dump_cov,
            trace_partition,
            overrides,
        } => {
            let env_seed = cli::env_seed()?;
            let config = cli::resolve_config(config.as_deref(), &overrides.into(), env_seed)?;
            let args = RunArgs {
                scenario_path: scenario,
                stream_path: stream,
                out_dir,
                dump_covariances: dump_cov,
                trace_partition,
            };
            let report = cli::cmd_run(config, &args)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "{} batches, {} samples: acc_source={} acc_gda={} acc_fused={}",
                report.aggregates.batches,
                report.aggregates.samples,
                fmt(report.aggregates.acc_source),
                fmt(report.aggregates.acc_gda),
                fmt(report.aggregates.acc_fused),
            );
            Ok(())
        }
        Command::Eval { reports, json } => {
            if reports.is_empty() {
                return Err(mmtta::Error::Config {
                    message: "eval needs at least one report file".to_string(),
                });
            }
            let (rows, table) = cli::cmd_eval(&reports)?;
            print!("{table}");
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&rows).map_err(|e| {
                    mmtta::Error::Format {
                        path: path.display().to_string(),
                        offset: 0,
                        message: e.to_string(),
                    }
                })?;
                std::fs::write(&path, text + "\n")
                    .map_err(|e| mmtta::Error::io(path.display().to_string(), e))?;
            }
            Ok(())
        }
        Command::DumpBank { bank } => {
            print!("{}", cli::cmd_dump_bank(&bank)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
