//! The push-world simulator, episode containers, datasets and batching.

pub mod batch;
pub mod dataset;
pub mod episode;
pub mod sim;

pub use batch::Batch;
pub use dataset::{generate_dataset, generate_episodes, load_dataset, Dataset, DatasetConfig};
pub use episode::{load_episode, save_episode, Episode};
pub use sim::{World, WorldConfig};
