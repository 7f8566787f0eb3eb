//! `segkit`: train, evaluate, benchmark, gradient-check, audit parameters and
//! generate synthetic data.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 numerical
//! failure (divergence, gradient or benchmark gate), 3 artifact mismatch,
//! 4 accuracy gate not reached.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segkit::decoder::DecoderVariant;
use segkit::SegError;
use segkit_tensor::DType;

#[derive(Parser, Debug)]
#[command(name = "segkit", version, about = "Retention-based semantic segmentation on the CPU")]
struct Cli {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Run seed: model initialization, batch order, benchmark inputs, synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

/// Architecture overrides shared by several subcommands.
#[derive(Args, Debug, Default)]
struct ArchArgs {
    /// Backbone preset: micro, tiny, small, base or large.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = parse_variant)]
    decoder_variant: Option<DecoderVariant>,
    /// Disable the zero-initialized residual layers.
    #[arg(long)]
    no_zir: bool,
    /// Decoder hidden width C.
    #[arg(long)]
    decoder_c: Option<usize>,
    #[arg(long)]
    n_cls: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for DType {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => DType::F32,
            DtypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BenchKind {
    Attention,
    Paradigm,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write checkpoint.bin, loss.csv and train.json.
    Train {
        #[arg(long)]
        iters: Option<usize>,
        /// Save and stop after this many iterations; the schedule still spans --iters.
        #[arg(long)]
        stop_at: Option<usize>,
        #[arg(long, value_enum)]
        dtype: Option<DtypeArg>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Score a checkpoint and write eval.json.
    Eval {
        /// Defaults to checkpoint.bin in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Add multi-scale inference.
        #[arg(long)]
        ms: bool,
        /// Multi-scale factors, comma separated; implies --ms.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// No mirrored views in multi-scale inference.
        #[arg(long)]
        no_flip: bool,
        /// Write predicted masks as PNG files into this directory.
        #[arg(long)]
        dump_mask: Option<PathBuf>,
    },
    /// Time the attention operators and retention paradigms; writes bench.csv.
    Bench {
        #[arg(long, value_enum, default_value = "all")]
        kind: BenchKind,
        /// Square attention sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Paradigm sequence lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Compare every gradient with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
    },
    /// Print the parameter breakdown; writes params.json.
    Params {
        /// Print only the decoder count.
        #[arg(long)]
        decoder_only: bool,
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Write a synthetic dataset folder.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        n_cls: Option<usize>,
    },
}

fn parse_variant(s: &str) -> Result<DecoderVariant, String> {
    s.parse().map_err(|e: SegError| e.to_string())
}

/// Failures of a subcommand, each with a stable exit code.
#[derive(Debug)]
pub enum CliError {
    Seg(SegError),
    GradientCheck(usize),
    AccuracyGate { reached: f64, gate: f64 },
}

impl From<SegError> for CliError {
    fn from(e: SegError) -> Self {
        CliError::Seg(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Seg(SegError::Diverged { .. } | SegError::BenchGate { .. }) => 2,
            CliError::GradientCheck(_) => 2,
            CliError::Seg(SegError::DigestMismatch { .. } | SegError::Checkpoint(_)) => 3,
            CliError::Seg(_) => 1,
            CliError::AccuracyGate { .. } => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Seg(e) => write!(f, "{e}"),
            CliError::GradientCheck(n) => write!(f, "{n} gradient checks exceeded the tolerance"),
            CliError::AccuracyGate { reached, gate } => {
                write!(f, "final pixel accuracy {reached:.4} is below the gate {gate}")
            }
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SEGKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| SegError::Config(format!("SEGKIT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| SegError::Config(format!("cannot size the thread pool: {e}")))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|()| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
