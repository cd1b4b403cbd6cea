use serde::{Deserialize, Serialize};

use super::forward::{
    decode_topdown, encode_pyramid, initial_state, posterior_cell, posterior_infer, prior_cell, prior_step, ExecMode,
};
use super::sampler::LatentSampler;
use super::stack::GhvaeStack;
use crate::distributions::sample_reparam;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Latents come from the prior; nothing about the future is consulted.
    Test,
    /// Latents come from the posterior given the true future (diagnostics).
    Posterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    LearnedPrior,
    /// `N(0, I)` in place of the learned prior.
    UniformPrior,
}

/// Inputs of a rollout; every tensor is `[B, ...]`.
#[derive(Clone, Copy, Debug)]
pub struct RolloutInput<'a> {
    /// Conditioning frames `x_0 .. x_{n-1}`.
    pub context: &'a [Tensor<f32>],
    /// `a_0, a_1, ...`; at least `n - 1 + horizon` when the stack takes actions.
    pub actions: Option<&'a [Tensor<f32>]>,
    /// True frames `x_n, x_{n+1}, ...`; required by posterior mode.
    pub future: Option<&'a [Tensor<f32>]>,
}

/// Predict `horizon` frames autoregressively. Each prediction samples one
/// latent at the deepest level and is fed back as the next input frame.
pub fn rollout(
    stack: &GhvaeStack,
    input: RolloutInput,
    horizon: usize,
    mode: RolloutMode,
    sampler: &mut LatentSampler,
) -> Result<Vec<Tensor<f32>>> {
    rollout_with(stack, input, horizon, mode, LatentSource::LearnedPrior, sampler)
}

/// As [`rollout`] in test mode with `z ~ N(0, I)`.
pub fn uniform_prior_rollout(
    stack: &GhvaeStack,
    input: RolloutInput,
    horizon: usize,
    sampler: &mut LatentSampler,
) -> Result<Vec<Tensor<f32>>> {
    rollout_with(stack, input, horizon, RolloutMode::Test, LatentSource::UniformPrior, sampler)
}

fn features(stack: &GhvaeStack, frame: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let mut tape = Tape::new();
    let x = tape.constant(frame.clone());
    let hs = encode_pyramid(stack, &mut tape, x, stack.depth())?;
    Ok(hs.into_iter().map(|h| tape.value(h).clone()).collect())
}

pub fn rollout_with(
    stack: &GhvaeStack,
    input: RolloutInput,
    horizon: usize,
    mode: RolloutMode,
    source: LatentSource,
    sampler: &mut LatentSampler,
) -> Result<Vec<Tensor<f32>>> {
    const OP: &str = "rollout";
    let k = stack.depth();
    let n = input.context.len();
    if n == 0 {
        return Err(Error::invalid(OP, "at least one context frame is required"));
    }
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let adim = stack.config.action_dim;
    if adim > 0 {
        let have = input.actions.map_or(0, |a| a.len());
        if have < n - 1 + horizon {
            return Err(Error::invalid(
                OP,
                format!("stack takes actions: need {} steps, got {have}", n - 1 + horizon),
            ));
        }
    }
    let action = |tape: &mut Tape<f32>, t: usize| -> Option<Var> {
        (adim > 0).then(|| tape.constant(input.actions.unwrap()[t].clone()))
    };
    let exec = match mode {
        RolloutMode::Test => ExecMode::Test,
        RolloutMode::Posterior => ExecMode::Train,
    };
    let future = match (mode, input.future) {
        (RolloutMode::Posterior, Some(f)) if f.len() >= horizon => f,
        (RolloutMode::Posterior, _) => {
            return Err(Error::invalid(OP, format!("posterior mode needs {horizon} true future frames")))
        }
        (RolloutMode::Test, _) => &[],
    };
    let b = input.context[0].shape()[0];
    let spec = stack.module(k).spec;
    let learned = source == LatentSource::LearnedPrior;

    let mut p_state = initial_state(stack, k, b);
    let mut q_state = initial_state(stack, k, b);
    let mut feats = features(stack, &input.context[0])?;
    for t in 0..n - 1 {
        let next = features(stack, &input.context[t + 1])?;
        let mut tape = Tape::new();
        if learned {
            let s = tape.constant(p_state);
            let h = tape.constant(feats[k - 1].clone());
            let a = action(&mut tape, t);
            let s = prior_cell(stack, &mut tape, k, s, h, a)?;
            p_state = tape.value(s).clone();
        }
        if mode == RolloutMode::Posterior {
            let s = tape.constant(q_state);
            let h = tape.constant(next[k - 1].clone());
            let s = posterior_cell(stack, &mut tape, k, s, h, exec)?;
            q_state = tape.value(s).clone();
        }
        feats = next;
    }

    let mut out = Vec::with_capacity(horizon);
    for i in 0..horizon {
        let t = n - 1 + i;
        let mut tape = Tape::new();
        let hs: Vec<Var> = feats.iter().map(|h| tape.constant(h.clone())).collect();
        let z = match mode {
            RolloutMode::Test if learned => {
                let s = tape.constant(p_state.clone());
                let a = action(&mut tape, t);
                let (p, s) = prior_step(stack, &mut tape, k, s, hs[k - 1], a)?;
                p_state = tape.value(s).clone();
                let noise = sampler.draw(k, spec.latent_shape(b));
                sample_reparam(&mut tape, &p, noise)?
            }
            RolloutMode::Test => {
                let noise = sampler.draw(k, spec.latent_shape(b));
                tape.constant(noise)
            }
            RolloutMode::Posterior => {
                let truth = features(stack, &future[i])?;
                let s = tape.constant(q_state.clone());
                let h = tape.constant(truth[k - 1].clone());
                let (q, s) = posterior_infer(stack, &mut tape, k, s, h, exec)?;
                q_state = tape.value(s).clone();
                let noise = sampler.draw(k, spec.latent_shape(b));
                sample_reparam(&mut tape, &q, noise)?
            }
        };
        let pred = decode_topdown(stack, &mut tape, k, z, &hs)?;
        let frame = tape.value(pred).clone();
        if i + 1 < horizon {
            feats = features(stack, &frame)?;
        }
        out.push(frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ladder::ImageSpec;
    use crate::model::stack::ModelConfig;

    fn stack(adim: usize) -> GhvaeStack {
        let image = ImageSpec {
            height: 16,
            width: 16,
            channels: 1,
        };
        let cfg = ModelConfig {
            action_dim: adim,
            ..ModelConfig::default()
        };
        let mut s = GhvaeStack::new(image, (4, 2), cfg, 0).unwrap();
        s.add_level(8, 4).unwrap();
        // Give the decoder heads some weight so that latents matter.
        for m in &mut s.modules {
            for p in m.params.iter_mut() {
                if p.name.contains("decoder/head/weight") {
                    p.value = p.value.map(|_| 0.3);
                }
            }
        }
        s
    }

    fn context(b: usize) -> Vec<Tensor<f32>> {
        (0..2)
            .map(|t| Tensor::from_fn(vec![b, 16, 16, 1], |i| ((i + t * 5) % 9) as f32 / 9.0))
            .collect()
    }

    #[test]
    fn one_deepest_draw_per_frame() {
        let s = stack(0);
        let ctx = context(3);
        let input = RolloutInput {
            context: &ctx,
            actions: None,
            future: None,
        };
        let mut sampler = LatentSampler::new(1);
        let frames = rollout(&s, input, 4, RolloutMode::Test, &mut sampler).unwrap();
        assert_eq!(frames.len(), 4);
        assert_eq!(frames[0].shape(), &[3, 16, 16, 1]);
        assert_eq!(sampler.draws().len(), 4);
        assert!(sampler.draws().iter().all(|d| d.level == 2 && d.numel == 3 * 4 * 4 * 4));
        assert!(rollout(&s, input, 0, RolloutMode::Test, &mut sampler).unwrap().is_empty());
    }

    #[test]
    fn seeds_control_the_samples() {
        let s = stack(0);
        let ctx = context(1);
        let input = RolloutInput {
            context: &ctx,
            actions: None,
            future: None,
        };
        let run = |seed| rollout(&s, input, 2, RolloutMode::Test, &mut LatentSampler::new(seed)).unwrap();
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        let uni = uniform_prior_rollout(&s, input, 2, &mut LatentSampler::new(5)).unwrap();
        assert_eq!(uni[1].shape(), run(5)[1].shape());
    }

    #[test]
    fn actions_are_required() {
        let s = stack(2);
        let ctx = context(1);
        let input = RolloutInput {
            context: &ctx,
            actions: None,
            future: None,
        };
        assert!(rollout(&s, input, 2, RolloutMode::Test, &mut LatentSampler::new(0)).is_err());
        let acts = vec![Tensor::zeros(vec![1, 2]); 3];
        let input = RolloutInput {
            actions: Some(&acts),
            ..input
        };
        assert!(rollout(&s, input, 2, RolloutMode::Test, &mut LatentSampler::new(0)).is_ok());
    }

    #[test]
    fn posterior_mode_needs_the_future() {
        let s = stack(0);
        let ctx = context(1);
        let input = RolloutInput {
            context: &ctx,
            actions: None,
            future: None,
        };
        assert!(rollout(&s, input, 2, RolloutMode::Posterior, &mut LatentSampler::new(0)).is_err());
        let fut = context(1);
        let input = RolloutInput {
            future: Some(&fut),
            ..input
        };
        let mut sampler = LatentSampler::new(0);
        assert_eq!(rollout(&s, input, 2, RolloutMode::Posterior, &mut sampler).unwrap().len(), 2);
        assert_eq!(sampler.draws().len(), 2);
    }
}
