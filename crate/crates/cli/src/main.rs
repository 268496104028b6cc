//! `cotflow` command-line driver.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
//! 3 numeric failure (divergence, non-finite state, NFE cap).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cotflow::eval::Metric;
use cotflow::ode::SolverKind;
use cotflow::tasks::TaskName;

#[derive(Debug, Parser)]
#[command(
    name = "cotflow",
    version,
    about = "Conditional flow matching with OT couplings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a task dataset as CSV.
    Gen(GenArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Integrate noise through a trained model.
    Sample(SampleArgs),
    /// Evaluate a checkpoint and append metrics rows.
    Eval(EvalArgs),
    /// `eval --metric w2`.
    EvalW2(EvalCommon),
    /// `eval --metric tv`.
    EvalTv(EvalCommon),
    /// Train and evaluate the coupling x seed x solver grid of a config.
    Sweep(SweepArgs),
    /// Dump cost matrices and assignments over a range of gamma values.
    OtMatrix(OtMatrixArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub task: TaskName,
    #[arg(long, default_value_t = cotflow::io::DEFAULT_TASK_SIZE)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Waypoints per trajectory (traj_fork only).
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from the checkpoint in the config's output directory.
    #[arg(long)]
    pub resume: bool,
    /// Save a checkpoint every this many steps (always at the end).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value = "euler")]
    pub solver: SolverKind,
    /// Step count for euler and midpoint.
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub atol: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write every integration path point to this CSV.
    #[arg(long)]
    pub paths: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalCommon {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to the task recorded in the checkpoint.
    #[arg(long)]
    pub task: Option<TaskName>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Metrics CSV; rows are appended.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    #[arg(long, value_delimiter = ',', default_value = "w2")]
    pub metric: Vec<Metric>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct OtMatrixArgs {
    #[arg(long, default_value = "moons")]
    pub task: TaskName,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Condition weights, multiplied by the batch's scale ratio.
    #[arg(long, value_delimiter = ',', default_value = "0,10,100,1000,10000")]
    pub gammas: Vec<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a.common, &a.metric),
        Command::EvalW2(a) => commands::eval(&a, &[Metric::W2]),
        Command::EvalTv(a) => commands::eval(&a, &[Metric::Tv]),
        Command::Sweep(a) => commands::sweep(&a),
        Command::OtMatrix(a) => commands::ot_matrix(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
