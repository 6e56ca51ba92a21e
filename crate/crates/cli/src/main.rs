mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gptqt_core::calib_stats::DEFAULT_DAMP_PCT;
use gptqt_core::gptq_engine::{MethodTag, DEFAULT_BLOCK};
use gptqt_core::quant_core::{
    DEFAULT_FINAL_BITS, DEFAULT_GRID_POINTS, DEFAULT_INTER_BITS, DEFAULT_RANGE_BITS,
};

use report::Format;

/// Two-step (linear, then binary-coding) weight quantization with Hessian
/// error compensation.
#[derive(Parser)]
#[command(name = "gptqt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic weights plus calibration and validation activations.
    Gen(GenArgs),
    /// Quantize one layer and write the packed GQTQ file.
    Quantize(QuantizeArgs),
    /// Measure weight and output error of a quantized layer on held-out data.
    Eval(EvalArgs),
    /// Time dense, dequantize-then-multiply and LUT matvec.
    Bench(BenchArgs),
    /// Run several methods (and optional sweeps) on the same layers.
    Compare(CompareArgs),
}

#[derive(Args, Clone)]
pub struct ShapeArgs {
    #[arg(long, default_value_t = 256)]
    pub rows: usize,
    #[arg(long, default_value_t = 256)]
    pub cols: usize,
    /// Activation samples per calibration / validation set.
    #[arg(long, default_value_t = 512)]
    pub nsamples: usize,
    /// Lag-one correlation between neighbouring input features.
    #[arg(long, default_value_t = 0.9)]
    pub rho: f32,
    /// Standard deviation of generated weights.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f32,
}

#[derive(Args)]
pub struct GenArgs {
    /// Existing directory; receives weights.gqtf, calib.gqtf and val.gqtf.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone)]
pub struct QuantArgs {
    /// rtn, gptq, gptq-minmse, bcq, gptq-bcq or gptqt.
    #[arg(long, default_value = "gptqt", value_parser = parse_method)]
    pub method: MethodTag,
    /// Final bit-width m.
    #[arg(long, default_value_t = DEFAULT_FINAL_BITS)]
    pub bits: u32,
    /// Intermediate linear bit-width n (gptqt only).
    #[arg(long, default_value_t = DEFAULT_INTER_BITS)]
    pub inter_bits: u32,
    /// Scale re-exploration range in bits (gptqt only).
    #[arg(long = "range", default_value_t = DEFAULT_RANGE_BITS)]
    pub range_bits: u32,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    /// Hessian damping as a fraction of its mean diagonal.
    #[arg(long, default_value_t = DEFAULT_DAMP_PCT)]
    pub damp: f64,
    /// Columns per lazy-update block.
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    pub block: usize,
}

#[derive(Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Held-out activations for the output error; defaults to --calib.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Packed GQTQ output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// GQTQ packed layer or GQTF dense tensor.
    #[arg(long)]
    pub quantized: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Comma-separated sizes, `N` for square or `RxC`.
    #[arg(long, default_value = "1024,2048,4096", value_parser = parse_sizes)]
    pub sizes: Sizes,
    #[arg(long, default_value_t = DEFAULT_FINAL_BITS)]
    pub bits: u32,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spread output rows over all cores.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Weight files, one per layer; pair each with a --calib (and --val).
    #[arg(long)]
    pub weights: Vec<PathBuf>,
    #[arg(long)]
    pub calib: Vec<PathBuf>,
    #[arg(long)]
    pub val: Vec<PathBuf>,
    /// Generate this many synthetic layers instead of reading files.
    #[arg(long, conflicts_with = "weights")]
    pub synthetic: Option<usize>,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Methods to run; all six by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<MethodTag>,
    /// Add gptqt rows for every intermediate width 3..=6 above --bits.
    #[arg(long)]
    pub sweep_inter_bits: bool,
    /// Add gptqt rows for re-exploration ranges 0, 1 and 2.
    #[arg(long)]
    pub sweep_range: bool,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone)]
pub struct Sizes(pub Vec<(usize, usize)>);

fn parse_method(s: &str) -> Result<MethodTag, String> {
    s.parse().map_err(|e: gptqt_core::Error| e.to_string())
}

fn parse_sizes(s: &str) -> Result<Sizes, String> {
    let dim = |t: &str| -> Result<usize, String> {
        match t.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("bad size {t:?}")),
        }
    };
    s.split(',')
        .map(|item| match item.split_once(['x', 'X']) {
            Some((r, c)) => Ok((dim(r)?, dim(c)?)),
            None => dim(item).map(|n| (n, n)),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Sizes)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Quantize(a) => commands::quantize(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Compare(a) => commands::compare(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
