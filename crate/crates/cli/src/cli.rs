//! Command-line surface of the `bsr` binary: clap definitions and dispatch
//! into [`crate::commands`].

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use bsr_core::memory::AccountingMode;

use crate::commands::{self, OptChoice, SchedChoice, TrainKnobs};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Round sequence lengths the way the published tables do.
    Paper,
    /// Count exactly what the tape retains.
    Exact,
}

impl From<ModeArg> for AccountingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Paper => AccountingMode::Paper,
            ModeArg::Exact => AccountingMode::Exact,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bsr",
    version,
    about = "Block-selective reprogramming for vision transformers: activation-memory \
             analysis, gradient verification, and desk-scale training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report activation memory for a configuration and training plan
    Analyze {
        /// Preset (deit-s, vit-b, toy) or a config file
        #[arg(long, default_value = "deit-s")]
        config: String,
        /// Plan preset (default, full, head-only, residual) or a plan file
        #[arg(long, default_value = "default")]
        plan: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Paper)]
        mode: ModeArg,
        /// Write the per-(block, role) breakdown as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count forward multiply-accumulates for a configuration and plan
    Flops {
        #[arg(long, default_value = "deit-s")]
        config: String,
        #[arg(long, default_value = "default")]
        plan: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Write the per-(block, component) breakdown as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tape gradients against central finite differences
    Gradcheck {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, default_value = "default")]
        plan: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale one analytic gradient tensor so the check must fail
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Check that a live tape retains exactly the predicted bytes
    Audit {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, default_value = "default")]
        plan: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the audited exact-mode breakdown as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all blocks on the source task and save a checkpoint
    Pretrain {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = OptChoice::Adamw)]
        optimizer: OptChoice,
        #[arg(long, value_enum, default_value_t = SchedChoice::Constant)]
        schedule: SchedChoice,
        #[arg(long, default_value_t = 64)]
        train_size: usize,
        #[arg(long, default_value_t = 32)]
        test_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path to write
        #[arg(long)]
        out: PathBuf,
        /// Write per-step metrics as CSV
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on the shifted target task under a plan
    Finetune {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, default_value = "default")]
        plan: String,
        /// Checkpoint written by `pretrain`
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = OptChoice::Adamw)]
        optimizer: OptChoice,
        #[arg(long, value_enum, default_value_t = SchedChoice::Constant)]
        schedule: SchedChoice,
        #[arg(long, default_value_t = 64)]
        train_size: usize,
        #[arg(long, default_value_t = 32)]
        test_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write per-step metrics as CSV
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the fine-tuned parameters as a checkpoint
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Fine-tune full, head-only, and the default plan from one checkpoint
    Compare {
        #[arg(long, default_value = "toy")]
        config: String,
        /// Checkpoint written by `pretrain`
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        /// Training minibatch size
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = OptChoice::Adamw)]
        optimizer: OptChoice,
        #[arg(long, value_enum, default_value_t = SchedChoice::Constant)]
        schedule: SchedChoice,
        #[arg(long, default_value_t = 64)]
        train_size: usize,
        #[arg(long, default_value_t = 32)]
        test_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batch size for the reported memory and FLOPs columns
        #[arg(long, default_value_t = 128)]
        mem_batch: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Paper)]
        mode: ModeArg,
        /// Write the comparison table as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank a grid of plans by activation memory, optionally training each
    PlanSearch {
        #[arg(long, default_value = "deit-s")]
        config: String,
        /// Grid file: one plan per line, `;`-separated `key = value` segments
        #[arg(long)]
        grid: PathBuf,
        /// Largest grid this command will accept
        #[arg(long, default_value_t = 64)]
        budget: usize,
        /// Fine-tuning epochs per plan; 0 ranks without training
        #[arg(long, default_value_t = 0)]
        epochs: usize,
        /// Batch size for the reported memory and FLOPs columns
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Training minibatch size
        #[arg(long, default_value_t = 8)]
        train_batch: usize,
        #[arg(long, default_value_t = 5e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = OptChoice::Adamw)]
        optimizer: OptChoice,
        #[arg(long, value_enum, default_value_t = SchedChoice::Constant)]
        schedule: SchedChoice,
        #[arg(long, default_value_t = 64)]
        train_size: usize,
        #[arg(long, default_value_t = 32)]
        test_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Paper)]
        mode: ModeArg,
        /// Start each fine-tune from this checkpoint instead of fresh weights
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the ranked table as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze { config, plan, batch, mode, out } => {
            commands::analyze(&config, &plan, batch, mode.into(), out.as_deref())
        }
        Command::Flops { config, plan, batch, out } => {
            commands::flops(&config, &plan, batch, out.as_deref())
        }
        Command::Gradcheck { config, plan, seed, corrupt_backward } => {
            commands::gradcheck(&config, &plan, seed, corrupt_backward)
        }
        Command::Audit { config, plan, seed, out } => {
            commands::audit(&config, &plan, seed, out.as_deref())
        }
        Command::Pretrain {
            config,
            epochs,
            batch,
            lr,
            optimizer,
            schedule,
            train_size,
            test_size,
            seed,
            out,
            metrics,
        } => {
            let knobs = TrainKnobs {
                epochs,
                batch,
                lr,
                optimizer,
                schedule,
                train_size,
                test_size,
                seed,
            };
            commands::pretrain(&config, &knobs, &out, metrics.as_deref())
        }
        Command::Finetune {
            config,
            plan,
            checkpoint,
            epochs,
            batch,
            lr,
            optimizer,
            schedule,
            train_size,
            test_size,
            seed,
            out,
            save,
        } => {
            let knobs = TrainKnobs {
                epochs,
                batch,
                lr,
                optimizer,
                schedule,
                train_size,
                test_size,
                seed,
            };
            commands::finetune_cmd(
                &config,
                &plan,
                &checkpoint,
                &knobs,
                out.as_deref(),
                save.as_deref(),
            )
        }
        Command::Compare {
            config,
            checkpoint,
            epochs,
            batch,
            lr,
            optimizer,
            schedule,
            train_size,
            test_size,
            seed,
            mem_batch,
            mode,
            out,
        } => {
            let knobs = TrainKnobs {
                epochs,
                batch,
                lr,
                optimizer,
                schedule,
                train_size,
                test_size,
                seed,
            };
            commands::compare(&config, &checkpoint, &knobs, mem_batch, mode.into(), out.as_deref())
        }
        Command::PlanSearch {
            config,
            grid,
            budget,
            epochs,
            batch,
            train_batch,
            lr,
            optimizer,
            schedule,
            train_size,
            test_size,
            seed,
            mode,
            checkpoint,
            out,
        } => {
            let knobs = TrainKnobs {
                epochs,
                batch: train_batch,
                lr,
                optimizer,
                schedule,
                train_size,
                test_size,
                seed,
            };
            commands::plan_search(
                &config,
                &grid,
                budget,
                &knobs,
                batch,
                mode.into(),
                checkpoint.as_deref(),
                out.as_deref(),
            )
        }
    }
}

/// Parses the process arguments and runs the selected command, returning the
/// process exit code. Argument errors exit through clap with code 2.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
