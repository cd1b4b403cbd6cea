//! The run configuration: one JSON document that fixes the data, the ladder,
//! training, evaluation and planning. Every stream of randomness derives from
//! the single `seed`.

use std::path::{Path, PathBuf};

use ghvae_core::data::dataset::DatasetConfig;
use ghvae_core::data::sim::WorldConfig;
use ghvae_core::metrics::EvalConfig;
use ghvae_core::model::{
    Horizon, ImageSpec, Ladder, LatentSource, ModelConfig, RolloutMode, TrainMode, TrainPhaseConfig,
};
use ghvae_core::planner::{PlanRequest, PushTaskConfig};
use ghvae_core::seed;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Offsets mixed into the run seed for each consumer.
mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const PLAN: u64 = 4;
    pub const ROLLOUT: u64 = 5;
    pub const VERIFY: u64 = 6;
    pub const FINETUNE: u64 = 99;
    pub const TRAIN: u64 = 100;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelChannels {
    pub hidden: usize,
    pub latent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    /// Dataset directory; relative paths resolve against the output directory.
    pub path: PathBuf,
    pub episodes: usize,
    /// Frames per episode.
    pub length: usize,
    /// Episodes at the end of the dataset kept out of training.
    pub held_out: usize,
    pub world: WorldConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Rollouts per held-out episode; each metric keeps the best.
    pub samples: usize,
    pub episodes_per_batch: usize,
    pub prior: LatentSource,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samples: 10,
            episodes_per_batch: 8,
            prior: LatentSource::LearnedPrior,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    Oracle,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSettings {
    pub trials: usize,
    pub batch: usize,
    pub horizon: usize,
    pub max_steps: usize,
    pub dynamics: DynamicsKind,
    pub task: PushTaskConfig,
}

impl Default for PlanSettings {
    fn default() -> Self {
        let request = PlanRequest::default();
        PlanSettings {
            trials: 20,
            batch: request.batch,
            horizon: request.horizon,
            max_steps: request.max_steps,
            dynamics: DynamicsKind::Learned,
            task: PushTaskConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image: ImageSpec,
    /// Channel counts per level, shallowest first. Their number is the depth.
    pub levels: Vec<LevelChannels>,
    pub kernel_size: usize,
    /// Conditioning frames.
    pub context: usize,
    /// Predicted frames.
    pub horizon: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub steps_per_phase: usize,
    pub sigma_post: f64,
    pub sigma_dec: f64,
    pub beta: f64,
    pub action_dim: usize,
    pub seed: u64,
    pub dataset: DataSettings,
    pub out: PathBuf,
    pub mode: TrainMode,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub plan: PlanSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        RunConfig {
            image: ImageSpec {
                height: world.height,
                width: world.width,
                channels: world.channels,
            },
            levels: vec![
                LevelChannels { hidden: 8, latent: 4 },
                LevelChannels { hidden: 16, latent: 8 },
                LevelChannels { hidden: 32, latent: 16 },
            ],
            kernel_size: 3,
            context: 2,
            horizon: 5,
            batch_size: 16,
            lr: 3e-3,
            steps_per_phase: 1000,
            sigma_post: 0.1,
            sigma_dec: 1.0,
            beta: 1.0,
            action_dim: world.action_dim(),
            seed: 0,
            dataset: DataSettings {
                path: PathBuf::from("data"),
                episodes: 2000,
                length: 7,
                held_out: 100,
                world,
            },
            out: PathBuf::from("runs/default"),
            mode: TrainMode::Greedy,
            eval: EvalSettings::default(),
            plan: PlanSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn ladder(&self) -> CliResult<Ladder> {
        let channels: Vec<(usize, usize)> = self.levels.iter().map(|l| (l.hidden, l.latent)).collect();
        Ok(Ladder::from_channels(self.image, &channels)?)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            action_dim: self.action_dim,
            sigma_post: self.sigma_post,
            sigma_dec: self.sigma_dec,
            beta: self.beta,
            kernel_size: self.kernel_size,
        }
    }

    pub fn window(&self) -> Horizon {
        Horizon {
            context: self.context,
            horizon: self.horizon,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            episodes: self.dataset.episodes,
            length: self.dataset.length,
            world: self.dataset.world,
            seed: seed::derive(self.seed, stream::DATA),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join(&self.dataset.path)
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, stream::INIT)
    }

    pub fn phase(&self, phase: usize, mode: TrainMode) -> TrainPhaseConfig {
        TrainPhaseConfig {
            phase,
            batch_size: self.batch_size,
            horizon: self.window(),
            lr: self.lr,
            steps: self.steps_per_phase,
            seed: seed::derive(self.seed, stream::TRAIN + phase as u64),
            mode,
        }
    }

    /// End-to-end training of the whole ladder gets the optimizer steps the
    /// greedy phases would have shared.
    pub fn e2e(&self) -> TrainPhaseConfig {
        TrainPhaseConfig {
            steps: self.steps_per_phase * self.depth(),
            ..self.phase(self.depth(), TrainMode::E2e)
        }
    }

    pub fn finetune(&self) -> TrainPhaseConfig {
        TrainPhaseConfig {
            seed: seed::derive(self.seed, stream::FINETUNE),
            ..self.phase(self.depth(), TrainMode::E2eFinetune)
        }
    }

    pub fn verify_seed(&self) -> u64 {
        seed::derive(self.seed, stream::VERIFY)
    }

    pub fn eval_config(&self, prior: LatentSource) -> EvalConfig {
        EvalConfig {
            context: self.context,
            horizon: self.horizon,
            samples: self.eval.samples,
            seed: seed::derive(self.seed, stream::EVAL),
            mode: RolloutMode::Test,
            source: prior,
            episodes_per_batch: self.eval.episodes_per_batch,
        }
    }

    pub fn plan_seed(&self) -> u64 {
        seed::derive(self.seed, stream::PLAN)
    }

    pub fn rollout_seed(&self) -> u64 {
        seed::derive(self.seed, stream::ROLLOUT)
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> CliResult<()> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        if self.levels.is_empty() {
            return invalid("levels must name at least one level".into());
        }
        self.ladder()?;
        self.model().validate()?;
        self.phase(1, self.mode).validate()?;
        if self.steps_per_phase == 0 {
            return invalid("steps_per_phase must be at least 1".into());
        }
        let w = &self.dataset.world;
        if (w.height, w.width, w.channels) != (self.image.height, self.image.width, self.image.channels) {
            return invalid(format!(
                "dataset world renders {}x{}x{} frames but the image is {}x{}x{}",
                w.height, w.width, w.channels, self.image.height, self.image.width, self.image.channels
            ));
        }
        if w.action_dim() != self.action_dim {
            return invalid(format!(
                "action_dim is {} but the dataset world produces {}-d actions",
                self.action_dim,
                w.action_dim()
            ));
        }
        if self.dataset.length < self.context + self.horizon {
            return invalid(format!(
                "episodes of {} frames cannot hold {} context and {} predicted frames",
                self.dataset.length, self.context, self.horizon
            ));
        }
        if self.dataset.held_out == 0 || self.dataset.held_out >= self.dataset.episodes {
            return invalid(format!(
                "held_out must be between 1 and {}, got {}",
                self.dataset.episodes.saturating_sub(1),
                self.dataset.held_out
            ));
        }
        if self.eval.samples == 0 || self.eval.episodes_per_batch == 0 {
            return invalid("eval samples and episodes_per_batch must be at least 1".into());
        }
        self.plan_request(0).validate()?;
        Ok(())
    }

    pub fn plan_request(&self, seed: u64) -> PlanRequest {
        PlanRequest {
            batch: self.plan.batch,
            horizon: self.plan.horizon,
            max_steps: self.plan.max_steps,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["learning_rate"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn bad_ladders_fail_validation() {
        let mut c = RunConfig::default();
        c.levels[1].hidden = 8;
        assert_eq!(c.validate().unwrap_err().exit_code(), crate::error::EXIT_INVALID);
        let mut c = RunConfig::default();
        c.levels[0].latent = 8;
        assert_eq!(c.validate().unwrap_err().exit_code(), crate::error::EXIT_INVALID);
    }

    #[test]
    fn mismatched_world_fails_validation() {
        let mut c = RunConfig::default();
        c.dataset.world.width = 16;
        assert!(c.validate().unwrap_err().to_string().contains("renders"));
        let c = RunConfig {
            action_dim: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("action_dim"));
    }
}
