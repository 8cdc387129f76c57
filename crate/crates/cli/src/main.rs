//! `modeprior` command-line driver.
//!
//! Exit codes: 0 success, 1 contract violation (bad input, failed check),
//! 2 IO error.

mod commands;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "modeprior", version, about = "Latent-prior diffusion lab on synthetic data")]
pub struct Cli {
    /// Master seed; overrides the seed of a config file when given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// JSON config file (training config for `train`, sweep settings for `sweep`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a synthetic dataset and extract its latents.
    GenData(GenDataArgs),
    /// Train a baseline or latent-conditioned model.
    Train(TrainArgs),
    /// Generate samples from a checkpoint.
    Sample(SampleArgs),
    /// Guidance sweep over a baseline/latent checkpoint pair.
    Sweep(SweepArgs),
    /// Draw latents into an editable file for later regeneration.
    Edit(EditArgs),
    /// Compute a metric report for a sample file.
    Eval(EvalArgs),
    /// Render samples or sweep results as SVG.
    Plot(PlotArgs),
    /// Re-hash every artifact listed in a directory manifest.
    VerifyManifest(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// gmm, gmm-unequal or canvas.
    #[arg(long, default_value = "gmm")]
    pub kind: String,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Latent scheme written to the latent file (default: text for mixtures, bbox for canvases).
    #[arg(long)]
    pub scheme: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Variant used when no config file is given: baseline or latent.
    #[arg(long, default_value = "latent")]
    pub variant: String,
    /// Print the full default config for the variant and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fixed class for every chain (default: chain_id mod n_classes).
    #[arg(long)]
    pub class: Option<usize>,
    /// Guidance scale (default 7.0 for mode-label latents, else 4.0).
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Latent file to condition on verbatim instead of sampling the prior.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    /// Prior sampling temperature.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Sample from the live weights instead of the EMA copy.
    #[arg(long)]
    pub no_ema: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub latent: PathBuf,
    /// Dataset directory providing the real samples.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated guidance scales.
    #[arg(long, default_value = "1,2,4,8")]
    pub gammas: String,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Sample CSV written by `sample`; its sibling `sample_meta.json` is read too.
    #[arg(long)]
    pub samples: PathBuf,
    /// Dataset directory providing the real samples.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub min_count: usize,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Sample CSV (2D data) to scatter by assigned mode.
    #[arg(long, conflicts_with = "sweep")]
    pub samples: Option<PathBuf>,
    /// Dataset directory; needed with --samples.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sweep CSV to draw metric-vs-gamma lines from.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Directory holding manifest.json (default: --out).
    pub dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
