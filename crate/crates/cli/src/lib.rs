//! `shd` command-line tool: training, offline squeezing of attention dumps,
//! oracle verification and head-redundancy analysis.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

pub mod commands;
pub mod config;
pub mod dump;
pub mod error;
pub mod metrics;
pub mod params;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use shd_core::distill::AttnLossKind;

use crate::commands::{OracleMode, RandomDumpSpec};
use crate::config::StrategyFlag;
use crate::error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "shd",
    version,
    about = "Squeezing-heads attention distillation at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttnLossFlag {
    Kl,
    Mse,
}

impl From<AttnLossFlag> for AttnLossKind {
    fn from(f: AttnLossFlag) -> Self {
        match f {
            AttnLossFlag::Kl => AttnLossKind::Kl,
            AttnLossFlag::Mse => AttnLossKind::Mse,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a teacher with plain cross-entropy.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student supervised by a trained teacher.
    Distill {
        /// Output directory of `train-teacher`.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "shd")]
        strategy: StrategyFlag,
        #[arg(long, value_enum, default_value = "kl")]
        attn_loss: AttnLossFlag,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a trained model's attention on one task sequence.
    Dump {
        /// Output directory of `train-teacher`.
        #[arg(long)]
        model: PathBuf,
        /// Seed of the task sequence.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the heads of a dump down to `--target-heads`.
    Squeeze {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        target_heads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare closed-form merging against exact solvers on one head group.
    Oracle {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Comma-separated head indices.
        #[arg(long, value_delimiter = ',', required = true)]
        group: Vec<usize>,
        #[arg(long, value_enum, default_value = "all")]
        mode: OracleMode,
        #[arg(long, default_value_t = shd_core::oracle::DEFAULT_GRID_STEP)]
        grid_step: f64,
    },
    /// Head-similarity and α statistics of a dump.
    Analyze {
        #[arg(long)]
        dump: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// First write a seeded random dump to `--dump`.
        #[arg(long)]
        make_random: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        seq_len: usize,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long)]
        causal: bool,
    },
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainTeacher { config, out } => commands::train_teacher_cmd(&config, &out),
        Command::Distill {
            teacher,
            config,
            strategy,
            attn_loss,
            out,
        } => commands::distill_cmd(&teacher, &config, strategy, attn_loss.into(), &out),
        Command::Dump { model, seed, out } => commands::dump_cmd(&model, seed, &out),
        Command::Squeeze {
            dump,
            target_heads,
            out,
        } => commands::squeeze_cmd(&dump, target_heads, &out),
        Command::Oracle {
            dump,
            layer,
            group,
            mode,
            grid_step,
        } => commands::oracle_cmd(&dump, layer, &group, mode, grid_step),
        Command::Analyze {
            dump,
            out,
            make_random,
            seed,
            layers,
            heads,
            seq_len,
            d_model,
            causal,
        } => {
            if make_random {
                let spec = RandomDumpSpec {
                    seed,
                    layers,
                    heads,
                    seq_len,
                    d_model,
                    causal,
                };
                commands::make_random_dump(spec, &dump)?;
            }
            commands::analyze_cmd(&dump, out.as_deref())
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
