//! `cadiff`: train, sample, corrupt, validate, eval and export-svg.
//!
//! Exit codes: 0 success, 1 invalid data or a failed run, 2 usage or I/O
//! error. Log verbosity comes from `CADIFF_LOG` (env_logger syntax).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cadiff::par::Exec;

#[derive(Parser, Debug)]
#[command(name = "cadiff", version, about = "Cascaded discrete diffusion for CAD command sequences")]
struct Cli {
    /// Execution backend for batched work.
    #[arg(long, value_enum, global = true, default_value_t = Backend::Parallel)]
    exec: Backend,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Parallel,
    Sequential,
}

impl From<Backend> for Exec {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Parallel => Exec::Parallel,
            Backend::Sequential => Exec::Sequential,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both denoisers; writes checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Draw sequences from a checkpoint.
    Sample(SampleArgs),
    /// Print the forward-corrupted view of a sequence at step t.
    Corrupt(CorruptArgs),
    /// Check sequences against the grammar; exit 1 if any is invalid.
    Validate(ValidateArgs),
    /// Compute COV, MMD, JSD, novelty, unique and invalidity.
    Eval(EvalArgs),
    /// Write one sketch of a sequence as SVG.
    ExportSvg(ExportSvgArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Total iteration count, overriding the config.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config; its schedule and net blocks must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Requested command count for length-conditioned checkpoints.
    #[arg(long)]
    pub length: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every sketch of every valid sample as SVG here.
    #[arg(long)]
    pub svg_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequence to corrupt when the file holds several.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Take the schedule from a run config.
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
    /// Take the schedule from a checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Training set for novelty; empty when absent.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub points: usize,
    #[arg(long, default_value_t = 28)]
    pub jsd_resolution: usize,
}

#[derive(Args, Debug)]
pub struct ExportSvgArgs {
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0)]
    pub sketch: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CADIFF_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let exec = Exec::from(cli.exec);
    let result = match cli.command {
        Command::Train(a) => commands::train(&a, exec),
        Command::Sample(a) => commands::sample(&a, exec),
        Command::Corrupt(a) => commands::corrupt(&a),
        Command::Validate(a) => commands::validate_cmd(&a),
        Command::Eval(a) => commands::eval(&a, exec),
        Command::ExportSvg(a) => commands::export_svg(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::DataError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
