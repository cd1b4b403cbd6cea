use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::elbo::{greedy_phase_elbo, Horizon};
use super::sampler::LatentSampler;
use super::stack::GhvaeStack;
use crate::data::{Batch, Episode};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{adam_step, AdamConfig, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Only the deepest module learns; the rest stay frozen.
    Greedy,
    /// Every module learns, from whatever weights the stack holds.
    E2e,
    /// Every module learns, starting from greedily trained weights.
    E2eFinetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPhaseConfig {
    pub phase: usize,
    pub batch_size: usize,
    pub horizon: Horizon,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainPhaseConfig {
    pub fn validate(&self) -> Result<()> {
        self.horizon.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-step training record; the terms are batch sums divided by the batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
    /// `-elbo / (B * T * pixels)`, the minimized quantity.
    pub loss: f64,
}

/// Train the deepest module (greedy) or every module (end-to-end) of `stack`
/// with Adam on `-elbo / (B * T * pixels)`. `on_step` sees every record as it
/// is produced.
pub fn train_phase(
    stack: &mut GhvaeStack,
    episodes: &[Episode],
    cfg: &TrainPhaseConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let k = cfg.phase;
    if k != stack.depth() {
        return Err(Error::Config(format!(
            "phase {k} must train the deepest module of a {}-level stack",
            stack.depth()
        )));
    }
    if episodes.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    match cfg.mode {
        TrainMode::Greedy => stack.set_trainable(|level| level == k),
        TrainMode::E2e | TrainMode::E2eFinetune => stack.set_trainable(|_| true),
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 0));
    let mut sampler = LatentSampler::new(seed::derive(cfg.seed, 1));
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let (b, t) = (cfg.batch_size, cfg.horizon.horizon);
    let norm = (b * t * stack.image.pixels()) as f64;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = Batch::sample(episodes, b, cfg.horizon.window(), &mut batch_rng)?;
        let mut tape = Tape::new();
        let diverged = |loss: f64| Error::Diverged { step, loss };
        let vars = match greedy_phase_elbo(stack, &mut tape, k, &batch, cfg.horizon, &mut sampler) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let terms = vars.values(&tape);
        let loss_var = tape.scale(vars.elbo, -1.0 / norm)?;
        let loss = tape.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        let grads = tape.backward(loss_var)?;
        for m in &mut stack.modules {
            let group = m.level() as u32;
            m.params.accumulate(&grads, group);
        }
        adam_step(
            stack.modules.iter_mut().flat_map(|m| m.params.iter_mut()),
            adam,
        );
        let record = StepRecord {
            step,
            recon: terms.recon / b as f64,
            kl: terms.kl / b as f64,
            elbo: terms.elbo / b as f64,
            loss,
        };
        on_step(&record);
        log.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ladder::ImageSpec;
    use crate::model::stack::ModelConfig;
    use crate::tensor::Tensor;

    fn tiny() -> (GhvaeStack, Vec<Episode>) {
        let image = ImageSpec {
            height: 8,
            width: 8,
            channels: 1,
        };
        let stack = GhvaeStack::new(image, (4, 2), ModelConfig::default(), 0).unwrap();
        let eps = (0..3)
            .map(|i| {
                let f = Tensor::from_fn(vec![5, 8, 8, 1], |j| ((i + j) % 5) as f32 / 5.0);
                Episode::new(f, None, 0).unwrap()
            })
            .collect();
        (stack, eps)
    }

    fn cfg(steps: usize) -> TrainPhaseConfig {
        TrainPhaseConfig {
            phase: 1,
            batch_size: 2,
            horizon: Horizon { context: 2, horizon: 2 },
            lr: 1e-2,
            steps,
            seed: 4,
            mode: TrainMode::Greedy,
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (mut a, eps) = tiny();
        let (mut b, _) = tiny();
        let la = train_phase(&mut a, &eps, &cfg(3), |_| {}).unwrap();
        let lb = train_phase(&mut b, &eps, &cfg(3), |_| {}).unwrap();
        assert_eq!(la, lb);
        for (pa, pb) in a.modules[0].params.iter().zip(b.modules[0].params.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn frozen_modules_are_untouched() {
        let (mut s, eps) = tiny();
        train_phase(&mut s, &eps, &cfg(1), |_| {}).unwrap();
        s.add_level(8, 4).unwrap();
        let before: Vec<_> = s.modules[0].params.iter().map(|p| p.value.clone()).collect();
        let c = TrainPhaseConfig { phase: 2, ..cfg(2) };
        train_phase(&mut s, &eps, &c, |_| {}).unwrap();
        let after: Vec<_> = s.modules[0].params.iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn preconditions() {
        let (mut s, eps) = tiny();
        assert!(train_phase(&mut s, &[], &cfg(1), |_| {}).is_err());
        let c = TrainPhaseConfig { phase: 2, ..cfg(1) };
        assert!(train_phase(&mut s, &eps, &c, |_| {}).is_err());
    }
}
