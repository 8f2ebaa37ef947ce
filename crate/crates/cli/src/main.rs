use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpctune_bo::campaign::Method;
use mpctune_cli::commands::{cmd_compare, cmd_eval, cmd_tune, EvalArgs, TuneArgs};

#[derive(Parser)]
#[command(name = "mpctune", version, about = "Bayesian tuning of torque-level MPC on a simulated manipulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a tuning campaign.
    Tune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(Method))]
        method: Option<Method>,
        /// Output directory; holds the journal, report and best θ.
        #[arg(long, env = "MPCTUNE_OUT", default_value = "runs/tune")]
        out: PathBuf,
        /// Parallel episodes during the initial design.
        #[arg(long)]
        workers: Option<usize>,
        /// Score solve time by iteration count instead of the wall clock.
        #[arg(long)]
        deterministic_time: bool,
    },
    /// Run one logged episode.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// default, vanilla-bo or saasbo.
        #[arg(long)]
        preset: Option<String>,
        /// JSON array of 12 values, or a best_theta.json from `tune`.
        #[arg(long, conflicts_with = "preset")]
        theta: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "MPCTUNE_OUT", default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long)]
        deterministic_time: bool,
    },
    /// Best-so-far traces of two campaign journals as CSV.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Tune {
            config,
            seed,
            method,
            out,
            workers,
            deterministic_time,
        } => cmd_tune(&TuneArgs {
            config,
            seed,
            method,
            out,
            workers,
            deterministic_time,
        }),
        Command::Eval {
            config,
            preset,
            theta,
            seed,
            out,
            deterministic_time,
        } => cmd_eval(&EvalArgs {
            config,
            preset,
            theta,
            seed,
            out,
            deterministic_time,
        }),
        Command::Compare { a, b, out } => cmd_compare(&a, &b, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
