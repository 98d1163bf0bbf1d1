//! Argument definitions and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands;
use crate::error::{CliError, EXIT_CONFIG, EXIT_OK};

#[derive(Parser, Debug)]
#[command(name = "nervlab", version, about = "Train, compress, benchmark and dissect neural video representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model to a frame directory under a budget.
    Train(TrainArgs),
    /// Quantize and entropy-code a checkpoint.
    Compress(CompressArgs),
    /// Rebuild a checkpoint (and optionally frames) from a bitstream.
    Decompress(DecompressArgs),
    /// Score a checkpoint or bitstream against source frames.
    Eval(EvalArgs),
    /// Rate-distortion sweep over checkpoints and bit widths.
    Rd(RdArgs),
    /// Equal-budget training of several configs.
    Bench(BenchArgs),
    /// Train a hyper-network on clips of one or more frame directories.
    HyperTrain(HyperTrainArgs),
    /// Encode the clips of a frame directory with a trained hyper-network.
    HyperEncode(HyperEncodeArgs),
    /// Decode clip bitstreams to frames.
    HyperDecode(HyperDecodeArgs),
    /// Per-kernel contribution maps of the head layer.
    Dissect(DissectArgs),
    /// Contribution fluctuation between adjacent frames.
    DissectMotion(DissectArgs),
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the artifacts of an earlier run in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset: nerv, ffnerv, enerv, nerv-ks15, rnerv-small, rnerv-large, rnerv-desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the stem width and replan the blocks.
    #[arg(long, conflicts_with = "target_params")]
    pub fc_dim: Option<usize>,
    /// Resize the widths to this parameter count.
    #[arg(long)]
    pub target_params: Option<usize>,
    /// Relative tolerance for --target-params.
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `mse`, `l1-ssim` or `l1-ssim:<alpha>`.
    #[arg(long, default_value = "mse")]
    pub loss: String,
    #[arg(long, default_value_t = 1)]
    pub warmup_epochs: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of PNG frames.
    #[arg(long)]
    pub frames: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// `epochs:N`, `seconds:S`, `flops:N` or a reference such as `nerv:300`.
    #[arg(long, visible_alias = "reference")]
    pub budget: String,
    /// Epochs timed when calibrating a reference budget.
    #[arg(long, default_value_t = 2)]
    pub calibration_epochs: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bit width in 4..=8.
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct DecompressArgs {
    #[arg(long)]
    pub bitstream: PathBuf,
    /// Also render this many frames.
    #[arg(long)]
    pub render: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PsnrModeArg {
    MeanMse,
    MeanFramePsnr,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "bitstream"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bitstream: Option<PathBuf>,
    #[arg(long)]
    pub per_frame: bool,
    #[arg(long, value_enum, default_value = "mean-mse")]
    pub psnr_mode: PsnrModeArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Psnr,
    Msssim,
}

#[derive(Args, Debug)]
pub struct RdArgs {
    #[arg(long)]
    pub frames: PathBuf,
    /// Trained checkpoints, one per model size.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "8,7,6,5,4")]
    pub bits: Vec<u8>,
    #[arg(long, value_enum, default_value = "psnr")]
    pub metric: MetricArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub frames: PathBuf,
    /// Config files to benchmark.
    #[arg(long, num_args = 1..)]
    pub configs: Vec<PathBuf>,
    /// Presets to benchmark, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub presets: Vec<String>,
    /// Shared budget, e.g. `seconds:60` or `nerv:300`.
    #[arg(long, visible_alias = "reference")]
    pub budget: String,
    #[arg(long, default_value_t = 2)]
    pub calibration_epochs: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct HyperTrainArgs {
    /// Frame directories; each is split into clips.
    #[arg(long, num_args = 1.., required = true)]
    pub frames: Vec<PathBuf>,
    /// Layout name (hypo-desk, hypo-fc16, hypo-fc20, hypo-mask-large, hypo-mask-small) or JSON file.
    #[arg(long, default_value = "hypo-desk")]
    pub layout: String,
    /// Backbone size: `desk` or `full`.
    #[arg(long, default_value = "desk")]
    pub backbone: String,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Train with weight token masking.
    #[arg(long)]
    pub masking: bool,
    #[arg(long, default_value_t = 0.5)]
    pub mask_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct HyperEncodeArgs {
    #[arg(long)]
    pub hypernet: PathBuf,
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long, value_enum, default_value = "off")]
    pub mask: Switch,
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct HyperDecodeArgs {
    #[arg(long)]
    pub hypernet: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub bitstreams: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("model_source").required(true).args(["checkpoint", "hypernet"])))]
pub struct DissectArgs {
    /// NeRV-family checkpoint with a conv head.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Hyper-network whose hypo-network head is dissected.
    #[arg(long, requires = "bitstreams")]
    pub hypernet: Option<PathBuf>,
    /// Clip bitstreams, in frame order.
    #[arg(long, num_args = 1..)]
    pub bitstreams: Vec<PathBuf>,
    /// Layer to dissect; only `head` is supported.
    #[arg(long, default_value = "head")]
    pub layer: String,
    /// Frame range `a..b` (end exclusive) or a single index.
    #[arg(long)]
    pub frames: String,
    /// Frames in the encoded video, for timestep normalisation of checkpoints
    /// (defaults to the range end).
    #[arg(long)]
    pub video_frames: Option<usize>,
    /// Emit images for the K largest kernels per frame only.
    #[arg(long)]
    pub top: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("nervlab: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => commands::train::train(a),
        Command::Compress(a) => commands::codec::compress(a),
        Command::Decompress(a) => commands::codec::decompress(a),
        Command::Eval(a) => commands::codec::eval(a),
        Command::Rd(a) => commands::codec::rd(a),
        Command::Bench(a) => commands::train::bench(a),
        Command::HyperTrain(a) => commands::hyper::hyper_train(a),
        Command::HyperEncode(a) => commands::hyper::hyper_encode(a),
        Command::HyperDecode(a) => commands::hyper::hyper_decode(a),
        Command::Dissect(a) => commands::dissect::dissect(a),
        Command::DissectMotion(a) => commands::dissect::dissect_motion(a),
    }
}
