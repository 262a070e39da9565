//! Command-line entry point: dataset generation, tracker training and
//! evaluation, baselines, ablation grids, the response task, and artifact
//! inspection.
//!
//! Exit codes: 0 success, 1 user error (bad arguments, missing or
//! incompatible artifacts), 2 internal error.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mmdst", version, about = "Multimodal dialogue state tracking lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset: scenes, dialogue splits, vocabulary, manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Training dialogues.
        #[arg(long, default_value_t = 300)]
        dialogues: usize,
        /// Validation dialogues.
        #[arg(long, default_value_t = 60)]
        val: usize,
        /// Test dialogues.
        #[arg(long, default_value_t = 60)]
        test: usize,
        #[arg(long, default_value_t = 300)]
        frames: u32,
        /// Number of valid object classes.
        #[arg(long, default_value_t = 193)]
        classes: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        min_objects: usize,
        #[arg(long, default_value_t = 8)]
        max_objects: usize,
    },
    /// Train the tracker and store the best-validation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat key = value experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with a turn-by-turn rollout.
    Eval {
        /// Checkpoint directory (checkpoint.json + params.bin).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "predicted")]
        prior: String,
        #[arg(long, default_value = "beam")]
        decode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a reference tracker over a split.
    Baseline {
        /// q-retrieval | state-prior | object-random | object-all |
        /// rnn-v | rnn-d | rnn-vd | rnn-vd-att
        #[arg(long)]
        name: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training epochs for the recurrent baselines.
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the response classifier on state-filtered video features.
    Respond {
        /// none | pred | pred-no-time | oracle
        #[arg(long)]
        states: String,
        #[arg(long)]
        data: PathBuf,
        /// Tracker checkpoint directory (required for predicted states).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a dataset directory, checkpoint, or report file.
    Inspect {
        #[arg(long)]
        path: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &mmdst_core::Error) -> i32 {
    use mmdst_core::Error::*;
    match e {
        Config(_) | Generation(_) | Checkpoint(_) | Io(_) | Json(_) | Execution(_)
        | Serialization(_) => 1,
        Numeric { .. } | Shape(_) => 2,
    }
}

fn run(cli: Cli) -> mmdst_core::Result<()> {
    match cli.command {
        Command::Gen {
            out,
            dialogues,
            val,
            test,
            frames,
            classes,
            seed,
            min_objects,
            max_objects,
        } => commands::gen(
            &out,
            dialogues,
            val,
            test,
            frames,
            classes,
            seed,
            min_objects,
            max_objects,
        ),
        Command::Train { data, config, out } => commands::train(&data, config.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            split,
            prior,
            decode,
            out,
        } => commands::eval(&ckpt, &data, &split, &prior, &decode, &out),
        Command::Baseline {
            name,
            data,
            split,
            config,
            epochs,
            out,
        } => commands::baseline(&name, &data, &split, config.as_deref(), epochs, &out),
        Command::Ablate {
            grid,
            data,
            config,
            split,
            out,
        } => commands::ablate(&grid, &data, config.as_deref(), &split, &out),
        Command::Respond {
            states,
            data,
            ckpt,
            config,
            epochs,
            out,
        } => commands::respond(&states, &data, ckpt.as_deref(), config.as_deref(), epochs, &out),
        Command::Inspect { path } => commands::inspect(&path),
    }
}
