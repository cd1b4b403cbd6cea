use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ladder::{ImageSpec, Ladder, LatentSpec};
use super::layers::{Binding, Decoder, Encoder, ParamFactory, PosteriorNet, PriorNet};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub action_dim: usize,
    /// Fixed posterior standard deviation.
    pub sigma_post: f64,
    /// Fixed decoder (likelihood) standard deviation.
    pub sigma_dec: f64,
    /// KL weight.
    pub beta: f64,
    /// Spatial extent of every convolution kernel; odd.
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
}

fn default_kernel_size() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            action_dim: 0,
            sigma_post: 0.1,
            sigma_dec: 1.0,
            beta: 1.0,
            kernel_size: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_post", self.sigma_post), ("sigma_dec", self.sigma_dec)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// One level of the hierarchy: encoder, decoder, prior and posterior.
#[derive(Clone, Debug)]
pub struct GhvaeModule {
    pub spec: LatentSpec,
    pub params: ParamStore<f32>,
    pub frozen: bool,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: PriorNet,
    pub posterior: PosteriorNet,
}

impl GhvaeModule {
    /// Fresh module for level `k` of `ladder`. The parameter layout depends only
    /// on the ladder and the config; `seed` only fills the values.
    pub fn new(ladder: &Ladder, k: usize, config: &ModelConfig, seed: u64) -> Self {
        let spec = ladder.levels[k - 1];
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hidden, latent) = (spec.hidden_channels, spec.latent_channels);
        let mut f = ParamFactory {
            store: &mut params,
            rng: &mut rng,
            kernel: config.kernel_size,
            prefix: format!("module{k}/encoder"),
        };
        let encoder = Encoder::new(&mut f, ladder.encoder_input_channels(k), hidden);
        f.prefix = format!("module{k}/decoder");
        let decoder = Decoder::new(&mut f, hidden, latent, ladder.decoder_output_channels(k), k == 1);
        f.prefix = format!("module{k}/prior");
        let prior = PriorNet::new(&mut f, hidden, latent, config.action_dim);
        f.prefix = format!("module{k}/posterior");
        let posterior = PosteriorNet::new(&mut f, hidden, latent);
        GhvaeModule {
            spec,
            params,
            frozen: false,
            encoder,
            decoder,
            prior,
            posterior,
        }
    }

    pub fn level(&self) -> usize {
        self.spec.level
    }

    pub fn binding(&self) -> Binding<'_> {
        Binding {
            store: &self.params,
            group: self.spec.level as u32,
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.params.set_requires_grad(!frozen);
    }

    /// Parameter count of one sub-network (`encoder`, `decoder`, `prior`, `posterior`).
    pub fn part_numel(&self, part: &str) -> usize {
        let prefix = format!("module{}/{part}/", self.spec.level);
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// An ordered list of modules over a shared image shape.
#[derive(Clone, Debug)]
pub struct GhvaeStack {
    pub image: ImageSpec,
    pub config: ModelConfig,
    pub modules: Vec<GhvaeModule>,
    /// Seed from which module initializations derive.
    pub seed: u64,
}

impl GhvaeStack {
    /// A stack with one fresh, trainable module.
    pub fn new(image: ImageSpec, first: (usize, usize), config: ModelConfig, seed: u64) -> Result<Self> {
        Self::from_ladder(&Ladder::from_channels(image, &[first])?, config, seed)
    }

    /// A stack holding every level of `ladder`, all trainable.
    pub fn from_ladder(ladder: &Ladder, config: ModelConfig, seed: u64) -> Result<Self> {
        ladder.validate()?;
        config.validate()?;
        let modules = (1..=ladder.depth())
            .map(|k| GhvaeModule::new(ladder, k, &config, seed::derive(seed, k as u64)))
            .collect();
        Ok(GhvaeStack {
            image: ladder.image,
            config,
            modules,
            seed,
        })
    }

    pub fn depth(&self) -> usize {
        self.modules.len()
    }

    pub fn ladder(&self) -> Ladder {
        Ladder {
            image: self.image,
            levels: self.modules.iter().map(|m| m.spec).collect(),
        }
    }

    pub fn module(&self, k: usize) -> &GhvaeModule {
        &self.modules[k - 1]
    }

    /// Freeze every existing module and append a fresh trainable one.
    pub fn add_module(&mut self, spec: LatentSpec) -> Result<()> {
        let mut ladder = self.ladder();
        ladder.levels.push(spec);
        ladder.validate()?;
        for m in &mut self.modules {
            m.set_frozen(true);
        }
        let k = ladder.depth();
        let module = GhvaeModule::new(&ladder, k, &self.config, seed::derive(self.seed, k as u64));
        self.modules.push(module);
        Ok(())
    }

    /// Append a level with the given channel counts and halved extents.
    pub fn add_level(&mut self, hidden: usize, latent: usize) -> Result<()> {
        let top = self.modules.last().map(|m| m.spec);
        let (h, w) = top.map_or((self.image.height, self.image.width), |s| (s.height, s.width));
        self.add_module(LatentSpec {
            level: self.depth() + 1,
            height: h / 2,
            width: w / 2,
            hidden_channels: hidden,
            latent_channels: latent,
        })
    }

    pub fn set_trainable(&mut self, trainable: impl Fn(usize) -> bool) {
        for m in &mut self.modules {
            let k = m.level();
            m.set_frozen(!trainable(k));
        }
    }

    pub fn numel(&self) -> usize {
        self.modules.iter().map(|m| m.params.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> ImageSpec {
        ImageSpec {
            height: 32,
            width: 32,
            channels: 1,
        }
    }

    #[test]
    fn add_module_freezes_the_rest() {
        let mut s = GhvaeStack::new(image(), (8, 4), ModelConfig::default(), 1).unwrap();
        assert!(!s.modules[0].frozen);
        s.add_level(16, 8).unwrap();
        assert_eq!(s.depth(), 2);
        assert!(s.modules[0].frozen && !s.modules[1].frozen);
        assert!(s.modules[0].params.iter().all(|p| !p.requires_grad));
        assert_eq!(s.module(2).spec.height, 8);
        assert!(s.add_level(16, 8).is_err());
    }

    #[test]
    fn parameter_names_are_scoped() {
        let s = GhvaeStack::new(image(), (8, 4), ModelConfig::default(), 1).unwrap();
        let m = &s.modules[0];
        assert!(m.params.by_name("module1/encoder/conv1/weight").is_some());
        assert!(m.params.by_name("module1/prior/cell/update/weight").is_some());
        let parts: usize = ["encoder", "decoder", "prior", "posterior"]
            .iter()
            .map(|p| m.part_numel(p))
            .sum();
        assert_eq!(parts, m.params.numel());
    }

    #[test]
    fn initialization_depends_on_seed_only() {
        let a = GhvaeStack::new(image(), (8, 4), ModelConfig::default(), 5).unwrap();
        let b = GhvaeStack::new(image(), (8, 4), ModelConfig::default(), 5).unwrap();
        let c = GhvaeStack::new(image(), (8, 4), ModelConfig::default(), 6).unwrap();
        let first = |s: &GhvaeStack| s.modules[0].params.get(0).value.clone();
        assert_eq!(first(&a), first(&b));
        assert_ne!(first(&a), first(&c));
    }
}
