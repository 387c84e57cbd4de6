use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;
use sigma_traj::harness::{self, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "sigma-traj", version, about = "Sigma-point trajectory optimization experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    /// Print solver warnings and per-run details.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Directory for output files (overrides `out_dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Iteration budget (overrides `max_iters`).
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Random seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Stall tolerance for `run`, closeness-to-final tolerance for `compare`.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the experiment in a config file and write its artifacts.
    Run { config: PathBuf },
    /// Tabulate one or more trace files.
    Compare {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Draw stochastic closed-loop rollouts of a saved policy.
    Sample {
        config: PathBuf,
        policy: PathBuf,
        #[arg(long, default_value_t = 60)]
        count: usize,
    },
}

const COMPARE_TOL: f64 = 1e-3;

fn load(path: &Path, global: &GlobalArgs) -> sigma_traj::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    Overrides {
        out_dir: global.out_dir.clone(),
        max_iters: global.max_iters,
        seed: global.seed,
        tol: global.tol,
    }
    .apply(&mut config)?;
    Ok(config)
}

fn execute(cli: &Cli) -> sigma_traj::Result<u8> {
    match &cli.command {
        Command::Run { config } => {
            let config = load(config, &cli.global)?;
            let report = harness::run(&config)?;
            println!(
                "{}: {} after {} iterations, final cost {:.10e}",
                config.name,
                if report.converged { "converged" } else { "iteration budget exhausted" },
                report.iterations,
                report.final_cost
            );
            for p in [&report.trace_path, &report.policy_path, &report.trajectory_path] {
                println!("  wrote {}", p.display());
            }
            Ok(report.exit_code() as u8)
        }
        Command::Compare { traces } => {
            let rows = harness::compare(traces, cli.global.tol.unwrap_or(COMPARE_TOL))?;
            print!("{}", harness::format_table(&rows));
            Ok(0)
        }
        Command::Sample { config, policy, count } => {
            let config = load(config, &cli.global)?;
            let path = harness::run_samples(&config, policy, *count, config.seed)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { LevelFilter::Info } else { LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
