mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "maskdn", version, about = "Masked-training image denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Add synthetic noise to a PNG or a directory of PNGs.
    Synth(SynthArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Denoise a PNG or a directory of PNGs with a checkpoint.
    Denoise(DenoiseArgs),
    /// Score degraded (or denoised) images against clean references.
    Eval(EvalArgs),
    /// Dump per-layer features of a checkpoint for CKA analysis.
    Features(FeaturesArgs),
    /// Pairwise linear CKA between two feature dumps.
    Cka(CkaArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseKind {
    Gaussian,
    Speckle,
    Poisson,
    Spatial,
    SaltPepper,
    Mixture,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    #[arg(long, value_enum)]
    pub noise: NoiseKind,
    /// Gaussian / spatially-correlated standard deviation on the 0-255 scale.
    #[arg(long)]
    pub sigma255: Option<f64>,
    /// Speckle variance.
    #[arg(long)]
    pub var: Option<f64>,
    /// Poisson scaling factor.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Salt & pepper density.
    #[arg(long)]
    pub density: Option<f64>,
    /// Mixture level 1-4.
    #[arg(long)]
    pub mix_level: Option<u8>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest path; defaults to `manifest.jsonl` beside (or inside) the output.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Overrides the config dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Fine-tune from these weights with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    pub init_from: Option<PathBuf>,
    /// Continue an interrupted run from one of its checkpoints.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub noisy: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Denoise the noisy images with this checkpoint before scoring.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Text for the noise_spec column.
    #[arg(long, default_value = "")]
    pub noise_spec: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG or a directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Token positions sampled across all inputs.
    #[arg(long, default_value_t = maskdn::cka::DEFAULT_POSITIONS)]
    pub positions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write per-layer feature statistics as JSON.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CkaArgs {
    #[arg(long)]
    pub features_a: PathBuf,
    #[arg(long)]
    pub features_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The error and its causes joined with ": ", skipping causes already quoted.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    one_line(&out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    maskdn::runtime::tune_allocator();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {}", describe(&e));
        return ExitCode::FAILURE;
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
