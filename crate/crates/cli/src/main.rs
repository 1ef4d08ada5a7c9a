use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(name = "stegnet", version, about = "Image-in-image steganography lab")]
struct Cli {
    /// Run everything on one thread so repeated runs are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train encoder and decoder; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Hide an image inside a cover with a trained checkpoint.
    Embed(EmbedArgs),
    /// Recover the hidden image from an embedded one.
    Decode(DecodeArgs),
    /// Replace the low bits of a cover with the high bits of a hidden image.
    LsbEmbed(LsbEmbedArgs),
    /// Read the hidden image back out of an LSB stego image.
    LsbExtract(LsbExtractArgs),
    /// Decoded rate, cover changing rate and capacity for one image set.
    Metrics(MetricsArgs),
    /// Run the LSB detectors on images and print a CSV verdict per file.
    Analyze(AnalyzeArgs),
    /// Sweep the detection threshold over clean and stego images.
    Roc(RocArgs),
    /// Look for data appended after a JPEG's end-of-image marker.
    JpegScan(JpegScanArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_dir: Option<PathBuf>,
    /// Train on this many generated images instead of a directory.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// `random` (fresh draws each step) or `fixed` (pairs i, i+1).
    #[arg(long)]
    pairing: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Loss log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Print a progress line every N steps (0 for none).
    #[arg(long, default_value_t = 100)]
    progress: u64,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cover: PathBuf,
    #[arg(long)]
    hidden: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    embedded: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LsbEmbedArgs {
    #[arg(long)]
    cover: PathBuf,
    #[arg(long)]
    hidden: PathBuf,
    /// Bits per channel byte, 1 to 8.
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// Scatter the hidden bytes with this seed instead of writing them in order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LsbExtractArgs {
    #[arg(long)]
    embedded: PathBuf,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    cover: PathBuf,
    #[arg(long)]
    embedded: PathBuf,
    #[arg(long)]
    hidden: PathBuf,
    #[arg(long)]
    decoded: PathBuf,
    /// Row identifier; defaults to the embedded file name.
    #[arg(long)]
    id: Option<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the cover/embedded residual image.
    #[arg(long)]
    residual: Option<PathBuf>,
    /// Magnification applied to the residual image.
    #[arg(long, default_value_t = 1.0)]
    magnify: f64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Image files or directories of images.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Fused score at or above which an image is called stego.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RocArgs {
    #[arg(long)]
    clean_dir: PathBuf,
    #[arg(long)]
    stego_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct JpegScanArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("could not pin the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::Decode(a) => commands::decode(a),
        Command::LsbEmbed(a) => commands::lsb_embed(a),
        Command::LsbExtract(a) => commands::lsb_extract(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Roc(a) => commands::roc(a),
        Command::JpegScan(a) => commands::jpeg_scan(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
