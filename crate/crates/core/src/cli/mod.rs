//! The `sima` command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or diverged training, 2 usage
//! error, 3 I/O error.

mod check;
mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{ChannelNorm, OrderingPolicy, Variant};
use crate::error::Error;
use crate::model::{Activation, Pooling};

pub use check::{run_check, CheckHooks, CheckOptions, PropertyOutcome, SoftmaxFn};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sima", version, about = "Softmax-free attention toolkit")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "SIMA_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Floating-point width; 32 is only available for `bench`.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["32", "64"]))]
    pub precision: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the randomized property suite.
    Check(CheckArgs),
    /// Time the attention kernels.
    Bench(BenchArgs),
    /// Train the toy classifier.
    Train(TrainArgs),
    /// Export a query/key saliency map as PGM.
    Saliency(SaliencyArgs),
    /// Print closed-form operation counts.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Sima,
    Msa,
    Xca,
    Elu,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Sima => Variant::SimA,
            VariantArg::Msa => Variant::Msa,
            VariantArg::Xca => Variant::Xca,
            VariantArg::Elu => Variant::EluLinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L1,
    L2,
    None,
}

impl From<NormArg> for ChannelNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => ChannelNorm::L1,
            NormArg::L2 => ChannelNorm::L2,
            NormArg::None => ChannelNorm::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Gelu,
    Relu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Gelu => Activation::Gelu,
            ActivationArg::Relu => Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Mean,
    Cls,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::MeanPool,
            PoolingArg::Cls => Pooling::ClsToken,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderingArg {
    Auto,
    TokensFirst,
    ChannelsFirst,
}

impl From<OrderingArg> for OrderingPolicy {
    fn from(o: OrderingArg) -> Self {
        match o {
            OrderingArg::Auto => OrderingPolicy::Auto,
            OrderingArg::TokensFirst => OrderingPolicy::TokensFirst,
            OrderingArg::ChannelsFirst => OrderingPolicy::ChannelsFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatrixArg {
    Q,
    K,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Token counts and head widths to draw from.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,7,8,16,31,64")]
    pub sizes: Vec<usize>,
    /// Random draws per property (the gradient property runs a tenth).
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "sima,msa,xca,elu")]
    pub variants: Vec<VariantArg>,
    #[arg(long, value_delimiter = ',', default_value = "256")]
    pub n_sweep: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub d_sweep: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 1000)]
    pub repeats: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    /// Use one product grouping for all variants at a shape.
    #[arg(long)]
    pub fix_ordering: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub plotdata: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "sima")]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, value_enum, default_value = "gelu")]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value = "l1")]
    pub norm: NormArg,
    #[arg(long, value_enum, default_value = "mean")]
    pub pooling: PoolingArg,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub patch_grid: usize,
    #[arg(long, default_value_t = 16)]
    pub d_in: usize,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Dataset size.
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 3.0)]
    pub signal_strength: f64,
    /// Output directory for `trace.csv` and `model.ckpt`.
    #[arg(long, default_value = "sima-train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, value_enum, default_value = "q")]
    pub matrix: MatrixArg,
    /// Square PGM whose side is `patch_grid * sqrt(d_in)`. Without it a
    /// seeded synthetic class-1 sample is used.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub upscale: usize,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, value_enum, default_value = "sima")]
    pub variant: VariantArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, value_enum, default_value = "auto")]
    pub ordering: OrderingArg,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Diverged { .. } | Error::Numeric { .. } => EXIT_FAILED,
        Error::Dimension { .. } | Error::Shape(_) | Error::Contract(_) | Error::Config(_) => {
            EXIT_USAGE
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// normal output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_hooks(args, &CheckHooks::default(), out, err)
}

/// Like [`run`] but with replaceable kernels for the `check` subcommand.
pub fn run_with_hooks<I, T>(
    args: I,
    hooks: &CheckHooks,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match commands::dispatch(&cli, hooks, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
