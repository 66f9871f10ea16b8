use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgnt_core::error::ContainerError;
use mgnt_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "mgnt", version, about = "Mesh graph network with a token-attention processor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed; overrides MGNT_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-trajectory work.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PredictorKind {
    /// The checkpointed network.
    Model,
    /// Replays the ground truth.
    Oracle,
    /// Keeps the state unchanged.
    Identity,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the training split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps (simulates an interruption).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Roll out a checkpoint on a dataset split and report metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_if_eq("predictor", "model"))]
        checkpoint: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long, required_unless_present = "trajectory")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Evaluate these trajectory files instead of a dataset split.
        #[arg(long, conflicts_with = "data")]
        trajectory: Vec<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum, default_value = "model")]
        predictor: PredictorKind,
    },
    /// Autoregressive rollout of one trajectory with error and attention output.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        /// Steps to predict; defaults to the stored length.
        #[arg(long)]
        horizon: Option<usize>,
        /// Also store the slice weights of every step and block.
        #[arg(long)]
        attention: bool,
    },
    /// Slice weights of one block at one stored frame.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 0)]
        block: usize,
    },
    /// Fast invariant suite: gradients, slice normalization, symmetries, contact search.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject a wrong gradient rule; the suite must fail.
        #[arg(long, hide = true)]
        sabotage: bool,
    },
}

/// Process exit status for an error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::TrainingAbort { .. } => 3,
        Error::Schema(_) => 4,
        Error::Container(c) => match c {
            ContainerError::Io(_) => 1,
            _ => 4,
        },
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train {
            common,
            data,
            resume,
            stop_after,
        } => commands::train(&common, &data, resume, stop_after),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            trajectory,
            horizon,
            predictor,
        } => commands::eval(&commands::EvalArgs {
            common: &common,
            checkpoint: checkpoint.as_deref(),
            data: data.as_deref(),
            split: match split {
                SplitArg::Train => mgnt_core::trajectory::Split::Train,
                SplitArg::Test => mgnt_core::trajectory::Split::Test,
            },
            trajectories: &trajectory,
            horizon,
            predictor,
        }),
        Command::Rollout {
            common,
            checkpoint,
            trajectory,
            horizon,
            attention,
        } => commands::rollout(&common, &checkpoint, &trajectory, horizon, attention),
        Command::ExportAttention {
            common,
            checkpoint,
            trajectory,
            frame,
            block,
        } => commands::export_attention(&common, &checkpoint, &trajectory, frame, block),
        Command::Verify { seed, sabotage } => commands::verify(seed, sabotage),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
