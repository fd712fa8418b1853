use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use mcint_core::pipeline::{self, Diagnostic, Outcome, PipelineError, PlanOptions};

/// Multicore interference channel characterization.
///
/// Environment: `MCINT_COUNTERS` selects the counter backend
/// (`native[:map.json]` or `simulated[:script.json]`); `MCINT_CORE_LIST`
/// maps topology cores, in order, to OS CPUs.
#[derive(Debug, Parser)]
#[command(name = "mcint", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Derive a campaign configuration from a platform topology.
    Plan {
        #[arg(long)]
        topology: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        /// JSON document with `applications` and `requirements` to add as
        /// software scenarios.
        #[arg(long)]
        applications: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: u64,
        #[arg(long, default_value_t = 10)]
        warmup: u64,
        #[arg(long, default_value_t = 1)]
        repetitions: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Size kernel iterations to roughly this many nanoseconds on this host.
        #[arg(long)]
        calibrate_ns: Option<u64>,
    },
    /// Execute every scenario and write one trace per repetition.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure a workload's per-channel resource usage.
    Fingerprint {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workload: String,
    },
    /// Check every counter event against kernels of known access counts.
    VerifyCounters {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare contended traces against their isolation baselines.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the structured and human-readable report.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        analysis: PathBuf,
    },
}

fn emit(d: &Diagnostic) {
    eprintln!("{}", serde_json::to_string(d).expect("diagnostics serialize"));
}

fn dispatch(command: Command) -> Result<Outcome, PipelineError> {
    match command {
        Command::Plan {
            topology,
            output,
            applications,
            samples,
            warmup,
            repetitions,
            seed,
            calibrate_ns,
        } => {
            let opts = PlanOptions {
                samples,
                warmup,
                repetitions,
                seed,
                calibrate: calibrate_ns.map(Duration::from_nanos),
                ..PlanOptions::default()
            };
            pipeline::cmd_plan(&topology, applications.as_deref(), &output, &opts)
        }
        Command::Run { config, out } => pipeline::cmd_run(&config, out.as_deref()),
        Command::Fingerprint { config, workload } => pipeline::cmd_fingerprint(&config, &workload),
        Command::VerifyCounters { config } => pipeline::cmd_verify_counters(&config),
        Command::Analyze { config, traces, out } => pipeline::cmd_analyze(&config, &traces, out.as_deref()),
        Command::Report { config, analysis } => pipeline::cmd_report(&config, &analysis),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match dispatch(cli.command) {
        Ok(outcome) => {
            for d in &outcome.diagnostics {
                emit(d);
            }
            for path in &outcome.written {
                println!("{}", path.display());
            }
            outcome.exit_code
        }
        Err(e) => {
            emit(&e.diagnostic());
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
