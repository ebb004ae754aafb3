//! `eqr`: dataset generation, training, scaling sweeps and diagnostics.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "eqr", version, about = "Train and probe weight-tied iterative reasoners")]
pub struct Cli {
    /// Root seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for batched evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/test splits and a manifest.
    GenData(GenData),
    /// Train a reasoner and write a checkpoint plus a CSV log.
    Train(Train),
    /// Accuracy and compute over a grid of depths and breadths.
    ScaleSweep(ScaleSweep),
    /// Residual traces, margins, contraction estimates and PCA projections.
    Diagnose(Diagnose),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// sudoku4, sudoku9, maze or maze30.
    pub task: String,
    /// `count=N`, `test=N`, `seed=N` and task parameters such as `target_clues=6`.
    pub params: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Train {
    /// JSON config with `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint; only `train.*` overrides apply.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also save every N optimizer steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub save_every: u64,
    /// Dotted overrides such as `model.hidden=64` or `train.total_steps=50`.
    pub overrides: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    Raw,
    Ema,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Evaluate only the first N instances.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Budget overrides such as `beta_eval=0.01` or `window=5`.
    #[arg(long = "set")]
    pub budget: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ScaleSweep {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Outer iterations per trajectory, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16,64")]
    pub depths: Vec<usize>,
    /// Independent restarts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub breadths: Vec<usize>,
    /// Parameter set to evaluate; `both` writes one row per set.
    #[arg(long, value_enum, default_value = "ema")]
    pub weights: Weights,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Diagnose {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Use the raw parameters instead of the EMA shadows.
    #[arg(long)]
    pub raw: bool,
    /// Outer iterations per trajectory.
    #[arg(long, default_value_t = 16)]
    pub depth: usize,
    /// Restarts per instance.
    #[arg(long, default_value_t = 4)]
    pub breadth: usize,
    /// Rollout residual per (instance, restart, step).
    #[arg(long)]
    pub residual_trace: bool,
    /// Output margin and correctness at the final state.
    #[arg(long)]
    pub margin: bool,
    /// Local Lipschitz estimate and fixed-point residual at the final state.
    #[arg(long)]
    pub contraction: bool,
    /// 2D PCA projection of all visited states.
    #[arg(long)]
    pub project: bool,
    /// Perturbation pairs per contraction estimate.
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    /// Perturbation scale for the contraction estimate.
    #[arg(long, default_value_t = 1e-2)]
    pub radius: f64,
    /// Directory receiving one CSV per diagnostic.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
