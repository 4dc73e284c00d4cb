use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "rangeseg", version, about = "Range-view LiDAR semantic segmentation")]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalOpts {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Weight manifest (JSON with a sibling .bin).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Input file or directory.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output directory (or file, for single-file outputs).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub power_watts: Option<f64>,
    #[arg(long, global = true)]
    pub split_cores: Option<usize>,
    /// Patch size for label recovery.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Use the int8 fake-quantized backend.
    #[arg(long, global = true)]
    pub quantized: bool,
    /// Label recovery strategy (nla, knn, unproject).
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Ground-truth label directory for `eval`.
    #[arg(long, global = true)]
    pub gt: Option<PathBuf>,
    /// Label-image file or directory for `postprocess`.
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    /// Seed for random weights and synthetic scenes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Synthetic frames to use when no --input is given.
    #[arg(long, global = true, default_value_t = 4)]
    pub frames: usize,
    /// Also write range-image PGMs from `project`.
    #[arg(long, global = true)]
    pub pgm: bool,
    /// Override the split halo (seam studies only).
    #[arg(long, global = true)]
    pub halo: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scans (.bin) to projected frames (.rv).
    Project,
    /// Fill the normal channels of projected frames.
    Normals,
    /// Frames (.rv) to predicted label images (.lbl).
    Infer,
    /// Frames plus label images to per-point .label files.
    Postprocess,
    /// Score predicted .label files against ground truth.
    Eval,
    /// Time the full pipeline.
    Benchmark,
    /// Parameters, MACs and GOPs of the configured network.
    CountOps,
    /// Calibrate int8 exponents and store them in the weight manifest.
    Quantize,
    /// Full pipeline: scans (.bin) to per-point .label files.
    Run,
    /// Write randomly initialised weights for the configured network.
    InitWeights,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let o = &cli.opts;
    let result = match cli.command {
        Command::Project => commands::project(o),
        Command::Normals => commands::normals(o),
        Command::Infer => commands::infer(o),
        Command::Postprocess => commands::postprocess(o),
        Command::Eval => commands::eval(o),
        Command::Benchmark => commands::benchmark(o),
        Command::CountOps => commands::count_ops(o),
        Command::Quantize => commands::quantize(o),
        Command::Run => commands::run(o),
        Command::InitWeights => commands::init_weights(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", commands::describe(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
