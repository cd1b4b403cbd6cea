//! Datasets: a directory of episode subdirectories plus `index.json`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{load_episode, save_episode, Episode};
use super::sim::{random_action, World, WorldConfig};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub length: usize,
    pub world: WorldConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub config: DatasetConfig,
    pub episodes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub episodes: Vec<Episode>,
}

/// Roll a random world forward under uniform random actions.
pub fn simulate_episode(world: WorldConfig, length: usize, episode_seed: u64) -> Result<Episode> {
    let mut w = World::random(world, episode_seed);
    let mut action_rng = ChaCha8Rng::seed_from_u64(seed::derive(episode_seed, 1));
    let mut frames = vec![w.render()];
    let mut actions = Vec::new();
    for _ in 1..length {
        let a = if world.action_conditioned {
            random_action(&mut action_rng)
        } else {
            [0.0, 0.0]
        };
        w = w.step(a);
        frames.push(w.render());
        actions.extend(a.iter().map(|&v| v as f32));
    }
    let frames = Tensor::stack(&frames)?;
    let actions = (world.action_conditioned && length > 1)
        .then(|| Tensor::new(vec![length - 1, 2], actions))
        .transpose()?;
    Episode::new(frames, actions, episode_seed)
}

/// Episode `i` uses seed `derive(cfg.seed, i)`.
pub fn generate_episodes(cfg: &DatasetConfig) -> Result<Vec<Episode>> {
    if cfg.episodes == 0 || cfg.length == 0 {
        return Err(Error::Data("episodes and length must be at least 1".into()));
    }
    (0..cfg.episodes)
        .into_par_iter()
        .map(|i| simulate_episode(cfg.world, cfg.length, seed::derive(cfg.seed, i as u64)))
        .collect()
}

fn episode_dir_name(i: usize) -> String {
    format!("ep{i:05}")
}

pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Dataset> {
    let episodes = generate_episodes(cfg)?;
    let dataset = Dataset {
        config: *cfg,
        episodes,
    };
    save_dataset(&dataset, dir)?;
    Ok(dataset)
}

pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..d.episodes.len()).map(episode_dir_name).collect();
    for (ep, name) in d.episodes.iter().zip(&names) {
        save_episode(ep, &dir.join(name))?;
    }
    let index = DatasetIndex {
        config: d.config,
        episodes: names,
    };
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if index.episodes.is_empty() {
        return Err(Error::Data(format!("{} lists no episodes", path.display())));
    }
    let episodes = index
        .episodes
        .iter()
        .map(|name| load_episode(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: index.config,
        episodes,
    })
}

impl Dataset {
    /// Split off the last `held_out` episodes.
    pub fn split(mut self, held_out: usize) -> Result<(Vec<Episode>, Vec<Episode>)> {
        if held_out == 0 || held_out >= self.episodes.len() {
            return Err(Error::Data(format!(
                "cannot hold out {held_out} of {} episodes",
                self.episodes.len()
            )));
        }
        let test = self.episodes.split_off(self.episodes.len() - held_out);
        Ok((self.episodes, test))
    }
}
