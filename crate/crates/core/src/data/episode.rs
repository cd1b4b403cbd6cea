//! Episode containers.
//!
//! An episode directory holds `manifest.json`, `frames.bin` (rank 4,
//! `L x H x W x C`) and, for action-conditioned episodes, `actions.bin`
//! (rank 2, `(L - 1) x action_dim`), both in the binary tensor format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ladder::ImageSpec;
use crate::tensor::{io, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[L, H, W, C]`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `[L - 1, action_dim]`.
    pub actions: Option<Tensor<f32>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub action_dim: usize,
    pub seed: u64,
}

impl Episode {
    pub fn new(frames: Tensor<f32>, actions: Option<Tensor<f32>>, seed: u64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(Error::Data(format!("frames must be rank 4, got shape {s:?}")));
        }
        if let Some(a) = &actions {
            if a.rank() != 2 || a.shape()[0] + 1 != s[0] {
                return Err(Error::Data(format!(
                    "actions shape {:?} does not match {} frames",
                    a.shape(),
                    s[0]
                )));
            }
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Episode {
            frames,
            actions,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self) -> ImageSpec {
        let s = self.frames.shape();
        ImageSpec {
            height: s[1],
            width: s[2],
            channels: s[3],
        }
    }

    pub fn action_dim(&self) -> usize {
        self.actions.as_ref().map_or(0, |a| a.shape()[1])
    }

    /// Frame `t` as `[H, W, C]`.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.index_axis0(t)
    }

    pub fn manifest(&self) -> EpisodeManifest {
        let img = self.image();
        EpisodeManifest {
            frames: self.len(),
            height: img.height,
            width: img.width,
            channels: img.channels,
            action_dim: self.action_dim(),
            seed: self.seed,
        }
    }
}

pub fn save_episode(ep: &Episode, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&ep.manifest())?;
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, manifest + "\n").map_err(|e| Error::io(&mpath, e))?;
    io::write(&dir.join("frames.bin"), &ep.frames)?;
    let apath = dir.join("actions.bin");
    match &ep.actions {
        Some(a) => io::write(&apath, a)?,
        None if apath.exists() => std::fs::remove_file(&apath).map_err(|e| Error::io(&apath, e))?,
        None => {}
    }
    Ok(())
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: EpisodeManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    let fpath = dir.join("frames.bin");
    let frames: Tensor<f32> = io::read(&fpath)?;
    let expected = [m.frames, m.height, m.width, m.channels];
    if frames.shape() != expected {
        return Err(Error::Format {
            path: fpath,
            msg: format!("frames shape {:?}, manifest says {expected:?}", frames.shape()),
        });
    }
    let apath = dir.join("actions.bin");
    let actions = if m.action_dim > 0 {
        let a: Tensor<f32> = io::read(&apath)?;
        if a.shape() != [m.frames - 1, m.action_dim] {
            return Err(Error::Format {
                path: apath,
                msg: format!(
                    "actions shape {:?}, manifest says [{}, {}]",
                    a.shape(),
                    m.frames - 1,
                    m.action_dim
                ),
            });
        }
        Some(a)
    } else {
        None
    };
    Episode::new(frames, actions, m.seed)
}
