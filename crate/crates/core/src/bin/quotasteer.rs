use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use quotasteer::harness::{self, ExitStatus, ExperimentConfig, Overrides};
use quotasteer::metrics::DistancePreset;

#[derive(Parser)]
#[command(
    name = "quotasteer",
    version,
    about = "Quota-steered generation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    subgroups: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ground {
    Unit,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Run the quota loop until the target histogram is met.
    Run(RunArgs),
    /// Run without quota tracking to measure the backend's own bias.
    Ablate(RunArgs),
    /// Closed-form and simulated coverage of uniform b-of-k sampling.
    Simulate {
        #[arg(long, default_value_t = 9)]
        k: u64,
        #[arg(long, default_value_t = 5)]
        b: u64,
        #[arg(long, default_value_t = 10)]
        trials: u64,
        #[arg(long, default_value_t = 10_000)]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// JS divergence, EMD and total variation between two label,count files.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Ground::Unit)]
        ground: Ground,
    },
    /// Pairwise Cohen's kappa between annotation files.
    Kappa { a: PathBuf, b: PathBuf },
    /// Per-acceptance CSV (label and running TV) from a report.json.
    TraceExport {
        report: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(|e| e.to_string())?;
    cfg.apply(&Overrides {
        seed: args.seed,
        out_dir: args.out_dir.clone(),
        batch_size: args.batch_size,
        subgroups: args.subgroups,
    });
    Ok(cfg)
}

fn experiment(args: &RunArgs, ablation: bool) -> ExitCode {
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(ExitStatus::ConfigError.code() as u8);
        }
    };
    let outcome = if ablation {
        harness::cmd_ablate(&cfg)
    } else {
        harness::cmd_run(&cfg)
    };
    if outcome.status == ExitStatus::Converged {
        println!("{}", outcome.message);
    } else {
        eprintln!("{}", outcome.message);
    }
    ExitCode::from(outcome.status.code() as u8)
}

fn read(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn tool(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            k,
            b,
            trials,
            runs,
            seed,
            json,
        } => {
            let out = harness::cmd_simulate(k, b, trials, runs, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                print!("{}", out.table());
            }
        }
        Command::Metrics { a, b, ground } => {
            let preset = match ground {
                Ground::Unit => DistancePreset::Unit,
                Ground::Linear => DistancePreset::Linear,
            };
            let m = harness::cmd_metrics(&read(&a)?, &read(&b)?, preset)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Kappa { a, b } => {
            for s in harness::cmd_kappa(&read(&a)?, &read(&b)?)? {
                println!("{}", serde_json::to_string(&s)?);
            }
        }
        Command::TraceExport { report, output } => {
            let csv = harness::cmd_trace_export(&report)?;
            match output {
                Some(p) => {
                    fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{csv}"),
            }
        }
        Command::Run(_) | Command::Ablate(_) => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => experiment(&args, false),
        Command::Ablate(args) => experiment(&args, true),
        other => match tool(other) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(ExitStatus::ConfigError.code() as u8)
            }
        },
    }
}
