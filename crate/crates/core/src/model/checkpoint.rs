//! Checkpoints: `manifest.json` plus one tensor file per parameter at
//! `<name>.ghvt`. Each module's hash is the SHA-256 of its serialized bytes:
//! for every parameter in order, the name, a NUL byte, and the encoded tensor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ladder::{ImageSpec, Ladder, LatentSpec};
use super::stack::{GhvaeModule, GhvaeStack, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleEntry {
    pub spec: LatentSpec,
    pub frozen: bool,
    pub sha256: String,
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub image: ImageSpec,
    pub depth: usize,
    pub config: ModelConfig,
    pub seed: u64,
    pub modules: Vec<ModuleEntry>,
}

impl CheckpointManifest {
    pub fn ladder(&self) -> Ladder {
        Ladder {
            image: self.image,
            levels: self.modules.iter().map(|m| m.spec).collect(),
        }
    }
}

pub fn module_bytes(m: &GhvaeModule) -> Vec<u8> {
    let mut out = Vec::new();
    for p in m.params.iter() {
        out.extend_from_slice(p.name.as_bytes());
        out.push(0);
        out.extend_from_slice(&io::encode(&p.value));
    }
    out
}

pub fn module_hash(m: &GhvaeModule) -> String {
    hex::encode(Sha256::digest(module_bytes(m)))
}

fn param_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ghvt"))
}

pub fn manifest_of(stack: &GhvaeStack) -> CheckpointManifest {
    CheckpointManifest {
        image: stack.image,
        depth: stack.depth(),
        config: stack.config,
        seed: stack.seed,
        modules: stack
            .modules
            .iter()
            .map(|m| ModuleEntry {
                spec: m.spec,
                frozen: m.frozen,
                sha256: module_hash(m),
                params: m.params.iter().map(|p| p.name.clone()).collect(),
            })
            .collect(),
    }
}

pub fn save_checkpoint(stack: &GhvaeStack, dir: &Path) -> Result<CheckpointManifest> {
    let manifest = manifest_of(stack);
    for m in &stack.modules {
        for p in m.params.iter() {
            let path = param_path(dir, &p.name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            io::write(&path, &p.value)?;
        }
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

/// Load a checkpoint, verifying every module against its recorded hash.
pub fn load_checkpoint(dir: &Path) -> Result<GhvaeStack> {
    let manifest = read_manifest(dir)?;
    let ladder = manifest.ladder();
    if manifest.depth != ladder.depth() {
        return Err(Error::Format {
            path: dir.join("manifest.json"),
            msg: format!("depth {} but {} modules listed", manifest.depth, ladder.depth()),
        });
    }
    let mut stack = GhvaeStack::from_ladder(&ladder, manifest.config, manifest.seed)?;
    for (m, entry) in stack.modules.iter_mut().zip(&manifest.modules) {
        let names: Vec<String> = m.params.iter().map(|p| p.name.clone()).collect();
        if names != entry.params {
            return Err(Error::Format {
                path: dir.join("manifest.json"),
                msg: format!("module {} lists parameters that do not match its layout", m.level()),
            });
        }
        for p in m.params.iter_mut() {
            let path = param_path(dir, &p.name);
            let value = io::read(&path)?;
            if value.shape() != p.value.shape() {
                return Err(Error::Format {
                    path,
                    msg: format!("shape {:?}, expected {:?}", value.shape(), p.value.shape()),
                });
            }
            p.value = value;
        }
        let actual = module_hash(m);
        if actual != entry.sha256 {
            return Err(Error::HashMismatch {
                module: m.level(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        m.set_frozen(entry.frozen);
    }
    Ok(stack)
}
