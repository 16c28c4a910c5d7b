use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use trocar::harness::{self, MatrixReport, MetricsRecord, RunConfig};
use trocar::robot::RobotModel;
use trocar::sim::SimTrace;
use trocar::Error;

const CONFIG_ERROR: u8 = 2;
const RUN_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "trocar",
    version,
    about = "Constrained torque-control benchmarks for RCM manipulators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the episodes of one config file (a single config or an array).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output` or `./runs`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Run every `*.json` config in a directory as one matrix.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Recompute metrics from a trace CSV.
    Metrics {
        #[arg(long)]
        trace: PathBuf,
        /// Samples before this time (s) are excluded.
        #[arg(long, default_value_t = 1.0)]
        settle: f64,
        /// Robot model JSON used for the gravity torque; defaults to the built-in arm.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Tabulate metrics files against the first one.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. }
        | Error::Usage(_)
        | Error::Model(_)
        | Error::Io { .. }
        | Error::Trace(_)
        | Error::InvalidAlpha(_)
        | Error::InconsistentTool { .. } => CONFIG_ERROR,
        _ => RUN_FAILURE,
    }
}

fn report_matrix(report: &MatrixReport, out: &Path) -> u8 {
    for run in &report.runs {
        match &run.error {
            Some(e) => error!("{}: {e}", run.label),
            None => println!("{}: {}", run.label, run.directory.display()),
        }
    }
    if let Some(c) = &report.comparison {
        println!("\n{}", c.to_table());
        println!("artifacts in {}", out.display());
    }
    if report.failed() {
        RUN_FAILURE
    } else {
        0
    }
}

fn run_configs(configs: &[RunConfig], out: Option<PathBuf>, jobs: usize) -> Result<u8, Error> {
    let out = out
        .or_else(|| configs.first().and_then(RunConfig::output_dir))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let report = harness::run_matrix(configs, &out, jobs)?;
    Ok(report_matrix(&report, &out))
}

fn metrics_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn read_metrics(path: &Path) -> Result<MetricsRecord, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn execute(command: Command) -> Result<u8, Error> {
    match command {
        Command::Run { config, out, jobs } => {
            run_configs(&harness::parse_config(&config)?, out, jobs)
        }
        Command::Sweep { configs, out, jobs } => {
            run_configs(&harness::parse_config_dir(&configs)?, out, jobs)
        }
        Command::Metrics {
            trace,
            settle,
            model,
            json,
        } => {
            let model = match model {
                Some(p) => RobotModel::load(p)?,
                None => RobotModel::fr3_standin(),
            };
            let trace = SimTrace::load_csv(&trace)?;
            let metrics = harness::compute_metrics(&trace, settle, &model)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&metrics).expect("serializable")
                );
            } else {
                let cmp = harness::compare_runs(&[("trace".to_string(), metrics)])?;
                println!("{}", cmp.to_table());
            }
            Ok(0)
        }
        Command::Compare { metrics, json } => {
            let runs = metrics
                .iter()
                .map(|p| Ok((metrics_label(p), read_metrics(p)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            let cmp = harness::compare_runs(&runs)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&cmp).expect("serializable")
                );
            } else {
                println!("{}", cmp.to_table());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
