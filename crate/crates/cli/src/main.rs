//! `minflight` command-line driver.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use minflight::progress::Stage;
use minflight::scenarios::ScenarioKind;

#[derive(Parser)]
#[command(
    name = "minflight",
    version,
    about = "Minimum-time quadrotor flight: plan, train, evaluate"
)]
struct Cli {
    /// Worker threads for planning, rollouts and evaluation. Outputs do not
    /// depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan guiding paths for every waypoint pair.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy over planned guiding paths.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `plan`.
        #[arg(long)]
        paths: PathBuf,
        /// Curriculum stage to start in.
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
        /// Continue from a periodic checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with mean actions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paths: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 30)]
        runs: usize,
        /// Nominal drag in every run instead of randomized drag.
        #[arg(long)]
        deterministic: bool,
        /// Stage whose reward terms go into the trajectory CSVs.
        #[arg(long, value_parser = parse_stage, default_value = "fast")]
        stage: Stage,
    },
    /// Write one artifact in its file format.
    Export {
        what: ExportKind,
        #[command(flatten)]
        common: Common,
        /// Plan directory, for `paths` and `trajectory`.
        #[arg(long)]
        paths: Option<PathBuf>,
        /// Policy checkpoint, for `trajectory`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a built-in scenario as JSON.
    GenerateScenario {
        #[arg(value_parser = parse_kind)]
        kind: ScenarioKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the master seed of the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    /// Binary distance grid.
    Esdf,
    /// Best combination as one plain-text polyline.
    Paths,
    /// Deterministic rollout as CSV.
    Trajectory,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

fn parse_kind(s: &str) -> Result<ScenarioKind, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot set up {n} worker threads: {e}");
            return ExitCode::from(error::EXIT_CONFIG);
        }
    }
    let result = match cli.command {
        Command::Plan { common } => commands::plan(&common.scenario, common.seed, &common.out),
        Command::Train {
            common,
            paths,
            stage,
            resume,
        } => commands::train(&commands::TrainArgs {
            scenario: common.scenario,
            seed: common.seed,
            out: common.out,
            paths,
            stage,
            resume,
            threads: cli.threads,
        }),
        Command::Eval {
            common,
            paths,
            checkpoint,
            runs,
            deterministic,
            stage,
        } => commands::eval(&commands::EvalArgs {
            scenario: common.scenario,
            seed: common.seed,
            out: common.out,
            paths,
            checkpoint,
            runs,
            deterministic,
            stage,
        }),
        Command::Export {
            what,
            common,
            paths,
            checkpoint,
        } => match what {
            ExportKind::Esdf => commands::export_esdf(&common.scenario, &common.out),
            ExportKind::Paths => {
                commands::export_paths(&common.scenario, paths.as_deref(), &common.out)
            }
            ExportKind::Trajectory => commands::export_trajectory(
                &common.scenario,
                common.seed,
                paths.as_deref(),
                checkpoint.as_deref(),
                &common.out,
            ),
        },
        Command::GenerateScenario { kind, seed, out } => {
            commands::generate(kind, seed, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
