//! `modquant` command-line front end.
//!
//! Exit codes: 0 ok, 2 usage, 3 malformed input, 4 invariant violation,
//! 5 numerical failure. Errors print one line to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(
    name = "modquant",
    version,
    about = "Modality-partitioned weight quantization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic model container.
    GenModel(GenModelArgs),
    /// Capture a calibration set at a module boundary of a model.
    GenCalib(GenCalibArgs),
    /// Quantize a model and write the packed checkpoint plus a JSON report.
    Quantize(QuantizeArgs),
    /// Pack/unpack random grids and check they survive exactly.
    PackRoundtrip(PackRoundtripArgs),
    /// Autotune the tiled kernel on a random packed layer and time it.
    Bench(BenchArgs),
    /// Print the packed size report of a model or checkpoint.
    Size(SizeArgs),
    /// Print CircularEval accuracy for a JSON record file.
    EvalCircular(EvalArgs),
}

#[derive(Debug, Args)]
struct GenModelArgs {
    #[arg(long)]
    vision_layers: usize,
    #[arg(long)]
    crossmodal_layers: usize,
    /// Width of both modules.
    #[arg(long)]
    dim: usize,
    /// Cross-modal width when it differs from `--dim`.
    #[arg(long)]
    crossmodal_dim: Option<usize>,
    /// MLP hidden width (defaults to twice the cross-modal width).
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Unquantized parameters to account for in size reports.
    #[arg(long, default_value_t = 0)]
    misc_params: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenCalibArgs {
    #[arg(long)]
    model: PathBuf,
    /// `vision` or `crossmodal`.
    #[arg(long)]
    module: String,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Token rows per sample.
    #[arg(long, default_value_t = 64)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib_v: Option<PathBuf>,
    #[arg(long)]
    calib_m: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Rows per quantization group; -1 for one group per column.
    #[arg(long, default_value_t = 128, allow_hyphen_values = true)]
    groupsize: i64,
    /// Round-to-nearest baseline instead of Hessian-weighted quantization.
    #[arg(long)]
    rtn: bool,
    #[arg(long)]
    symmetric: bool,
    #[arg(long, default_value_t = 0.01)]
    damp: f32,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the JSON report (default: `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PackRoundtripArgs {
    #[arg(long)]
    bits: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    cases: usize,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value_t = 128, allow_hyphen_values = true)]
    groupsize: i64,
    /// JSON array of tile configs (default: built-in sweep).
    #[arg(long)]
    configs: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the timing span tree of the best config to this JSON file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SizeArgs {
    /// Model or quantized checkpoint container.
    #[arg(long)]
    model: PathBuf,
    /// Required for an unquantized model; must match for a checkpoint.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    groupsize: Option<i64>,
    /// Compare against an f32 model instead of f16.
    #[arg(long)]
    f32_baseline: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    records: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] modquant::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => e.kind().exit_code() as u8,
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Json { .. } | CliError::Format(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

core_from!(
    modquant::container::ContainerError,
    modquant::calibration::CalibrationError,
    modquant::quant::QuantError,
    modquant::pack::PackError,
    modquant::kernel::KernelError,
    modquant::pipeline::PipelineError,
    modquant::tensor::TensorError
);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                let msg = e.to_string();
                eprintln!(
                    "error: {}",
                    msg.lines()
                        .next()
                        .unwrap_or("invalid arguments")
                        .trim_start_matches("error: ")
                );
            }
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::GenCalib(a) => commands::gen_calib(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::PackRoundtrip(a) => commands::pack_roundtrip(a),
        Command::Bench(a) => commands::bench(a),
        Command::Size(a) => commands::size(a),
        Command::EvalCircular(a) => commands::eval_circular(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
