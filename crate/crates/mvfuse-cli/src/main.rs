//! `mvfuse`: dataset generation, training, evaluation, gradient auditing and
//! the ablation grid for the multi-vector fusion toolkit.
//!
//! Exit codes: 0 success, 1 IO/environment, 2 usage/validation,
//! 3 verification or numeric failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvfuse_core::Error;

#[derive(Parser)]
#[command(name = "mvfuse", version, about = "multi-vector fusion embedding toolkit")]
pub struct Cli {
    /// Flat key=value config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts (default: $MVFUSE_OUT_DIR or `.`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic mixed-pattern retrieval dataset.
    Gen(GenArgs),
    /// Train the encoder on a dataset with cached-gradient updates.
    Train(TrainArgs),
    /// Score Precision@1 of a checkpoint over a dataset's eval pool.
    Eval(EvalArgs),
    /// Audit analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the aggregator/mask/alpha ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Training pairs.
    #[arg(long)]
    pub items: Option<usize>,
    /// Held-out evaluation pairs.
    #[arg(long = "eval-items")]
    pub eval_items: Option<usize>,
    /// Total feature width (must be a multiple of aspects+1).
    #[arg(long = "feature-dim")]
    pub feature_dim: Option<usize>,
    /// Aspect blocks per item.
    #[arg(long)]
    pub aspects: Option<usize>,
    /// Four comma-separated pattern proportions, summing to 1.
    #[arg(long)]
    pub mix: Option<String>,
    /// Noise level on planted blocks.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Fraction of pairs drawn from a small topic codebook.
    #[arg(long = "near-dup-rate")]
    pub near_dup_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset file path (default: <out-dir>/synth.dat).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Training knobs shared by `train` and `ablate`.
#[derive(Args, Clone)]
pub struct TrainKnobs {
    /// Contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Hard-negative amplification strength (0 disables it).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fine-grained embedding rows.
    #[arg(long = "n-fine")]
    pub n_fine: Option<usize>,
    /// Capacity multiplier: trunk width is m * (n_fine + 1).
    #[arg(long = "m")]
    pub m_capacity: Option<usize>,
    #[arg(long = "batch")]
    pub batch: Option<usize>,
    #[arg(long = "sub-batch")]
    pub sub_batch: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd_momentum or adam_like.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// logsumexp, max or mean-max.
    #[arg(long)]
    pub aggregator: Option<String>,
    /// Exclude the global-to-global similarity family.
    #[arg(long = "mask-g2g")]
    pub mask_g2g: bool,
    /// Exclude the fine-to-global similarity family.
    #[arg(long = "mask-f2g")]
    pub mask_f2g: bool,
    /// Exclude the global-to-fine similarity family.
    #[arg(long = "mask-g2f")]
    pub mask_g2f: bool,
    /// Exclude the fine-to-fine similarity family.
    #[arg(long = "mask-f2f")]
    pub mask_f2f: bool,
    /// double or single.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset file produced by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    /// Also write a checkpoint every K steps (0 = final only).
    #[arg(long = "checkpoint-every")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset file produced by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Encoder checkpoint to score.
    #[arg(long, conflicts_with = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Score the built-in block-selector reference encoder instead.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub aggregator: Option<String>,
    #[arg(long = "mask-g2g")]
    pub mask_g2g: bool,
    #[arg(long = "mask-f2g")]
    pub mask_f2g: bool,
    #[arg(long = "mask-g2f")]
    pub mask_g2f: bool,
    #[arg(long = "mask-f2f")]
    pub mask_f2f: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Deliberately corrupt one gradient term; the audit must then fail.
    #[arg(long)]
    pub corrupt: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Dataset file produced by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    /// Table file path (default: <out-dir>/ablation.tsv).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => 1,
        Error::Dimension(_) | Error::Domain(_) | Error::Precondition(_) | Error::Config(_) => 2,
        Error::DegenerateEmbedding { .. } | Error::NonFinite { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
