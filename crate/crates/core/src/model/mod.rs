//! The hierarchical model: shape ladder, per-level modules, the phase
//! objective, training, rollouts and checkpoints.

pub mod checkpoint;
pub mod elbo;
pub mod forward;
pub mod ladder;
pub mod layers;
pub mod miniature;
pub mod rollout;
pub mod sampler;
pub mod stack;
pub mod train;

pub use checkpoint::{load_checkpoint, module_hash, save_checkpoint, CheckpointManifest};
pub use elbo::{greedy_phase_elbo, ElboTerms, Horizon};
pub use forward::{decode_topdown, encode_pyramid, posterior_infer, prior_step, ExecMode};
pub use ladder::{ImageSpec, Ladder, LatentSpec};
pub use rollout::{rollout, rollout_with, uniform_prior_rollout, LatentSource, RolloutInput, RolloutMode};
pub use sampler::{DrawRecord, LatentSampler};
pub use stack::{GhvaeModule, GhvaeStack, ModelConfig};
pub use train::{train_phase, StepRecord, TrainMode, TrainPhaseConfig};
