use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::config::DynamicsKind;

#[derive(Debug, Parser)]
#[command(name = "ghvae", version, about = "Greedy hierarchical VAEs for video prediction")]
pub struct Cli {
    /// Run configuration (JSON). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the sprite dataset.
    GenData,
    /// Train one greedy phase, or every phase in order.
    Train(TrainArgs),
    /// Best-of-N PSNR and SSIM on the held-out episodes.
    Eval(EvalArgs),
    /// Render sampled rollouts of one held-out episode.
    Rollout(RolloutArgs),
    /// Random-shooting planning on push tasks.
    Plan(PlanArgs),
    /// Estimated training memory, greedy against end-to-end.
    MemoryReport(MemoryArgs),
    /// Gradient, KL and evidence-bound checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("which").required(true).args(["phase", "all", "finetune"])))]
pub struct TrainArgs {
    /// Train module K; earlier phases must have been run.
    #[arg(long, value_name = "K")]
    pub phase: Option<usize>,
    /// Every phase the configured mode calls for.
    #[arg(long)]
    pub all: bool,
    /// Fine-tune every module of the last greedy checkpoint.
    #[arg(long)]
    pub finetune: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    Learned,
    Uniform,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory; defaults to the last one the configured mode produces.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where test-time latents come from; overrides the config.
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Index into the held-out episodes.
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    /// Write an animated GIF.
    #[arg(long)]
    pub gif: bool,
    /// Write a PNG strip (the default when neither is given).
    #[arg(long)]
    pub strip: bool,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the configured dynamics.
    #[arg(long, value_enum)]
    pub dynamics: Option<DynamicsKind>,
    /// Overrides the configured number of trials.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MemoryArgs {
    /// Checkpoint manifest (file or directory) or ladder JSON; defaults to the run config's ladder.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Samples per step; defaults to the training batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub dtype_bytes: usize,
    /// Also report savings against depth for the default ladder family.
    #[arg(long)]
    pub curve: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random instances per op in the gradient check.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Monte Carlo samples for the KL check.
    #[arg(long, default_value_t = 100_000)]
    pub kl_samples: usize,
    /// Random miniatures in the evidence-bound check.
    #[arg(long, default_value_t = 100)]
    pub miniatures: usize,
}
