use serde::{Deserialize, Serialize};

use super::forward::{
    decode_topdown, encode_pyramid, initial_state, posterior_cell, posterior_heads, prior_cell, prior_heads, ExecMode,
};
use super::sampler::LatentSampler;
use super::stack::GhvaeStack;
use crate::data::Batch;
use crate::distributions::{self, DiagonalGaussian, Std};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    /// Conditioning frames before the first scored prediction.
    pub context: usize,
    /// Scored predictions.
    pub horizon: usize,
}

impl Horizon {
    pub fn window(&self) -> usize {
        self.context + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.horizon == 0 {
            return Err(Error::Config("context and horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// The terms of the objective, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    /// Summed log-likelihood of the scored frames.
    pub recon: Var,
    /// Summed KL between posterior and prior.
    pub kl: Var,
    /// `recon - beta * kl`.
    pub elbo: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
}

impl ElboVars {
    pub fn values(&self, tape: &Tape<f32>) -> ElboTerms {
        let v = |x: Var| tape.value(x).item() as f64;
        ElboTerms {
            recon: v(self.recon),
            kl: v(self.kl),
            elbo: v(self.elbo),
        }
    }
}

/// Objective of phase `k` over the first `h.window()` frames of `batch`.
///
/// For `t = context-1 .. context+horizon-2`, with features of the true frames:
/// `z ~ q^k(. | x_{t+1})`, `x^_{t+1} = decode(z, h_t)`, and the sums
/// `recon = sum log N(x_{t+1}; x^_{t+1}, sigma_dec)`, `kl = sum KL(q^k || p^k)`.
/// Earlier steps only advance the recurrent states.
pub fn greedy_phase_elbo(
    stack: &GhvaeStack,
    tape: &mut Tape<f32>,
    k: usize,
    batch: &Batch,
    h: Horizon,
    sampler: &mut LatentSampler,
) -> Result<ElboVars> {
    h.validate()?;
    if k == 0 || k > stack.depth() {
        return Err(Error::invalid(
            "greedy_phase_elbo",
            format!("phase {k} of a {}-level stack", stack.depth()),
        ));
    }
    let len = h.window();
    if batch.length < len {
        return Err(Error::Data(format!(
            "episodes hold {} frames, context + horizon needs {len}",
            batch.length
        )));
    }
    let b = batch.batch;
    let rows = len * b;
    let frames = {
        let mut shape = batch.frames.shape().to_vec();
        shape[0] = rows;
        let data = batch.frames.data()[..rows * batch.frame_numel()].to_vec();
        tape.constant(Tensor::new(shape, data)?)
    };
    let hs = encode_pyramid(stack, tape, frames, k)?;
    let top = hs[k - 1];
    let spec = stack.module(k).spec;

    let mut p_state = tape.constant(initial_state(stack, k, b));
    let mut q_state = tape.constant(initial_state(stack, k, b));
    let (mut p_means, mut p_stds, mut q_means, mut noise) = (vec![], vec![], vec![], vec![]);
    for t in 0..len - 1 {
        let h_t = tape.slice_batch(top, t * b, b)?;
        let h_next = tape.slice_batch(top, (t + 1) * b, b)?;
        let a_t = batch.actions_at(t).map(|a| tape.constant(a));
        p_state = prior_cell(stack, tape, k, p_state, h_t, a_t)?;
        q_state = posterior_cell(stack, tape, k, q_state, h_next, ExecMode::Train)?;
        if t + 1 >= h.context {
            let p = prior_heads(stack, tape, k, p_state)?;
            let q = posterior_heads(stack, tape, k, q_state)?;
            let Std::Learned(p_std) = p.std else {
                unreachable!("the prior scale is learned")
            };
            p_means.push(p.mean);
            p_stds.push(p_std);
            q_means.push(q.mean);
            noise.push(sampler.draw(k, spec.latent_shape(b)));
        }
    }
    let p = DiagonalGaussian {
        mean: tape.concat_batch(&p_means)?,
        std: Std::Learned(tape.concat_batch(&p_stds)?),
    };
    let q = DiagonalGaussian::fixed(tape.concat_batch(&q_means)?, stack.config.sigma_post)?;
    let z = distributions::sample_reparam(tape, &q, Tensor::concat_axis0(&noise)?)?;

    let first = (h.context - 1) * b;
    let scored = h.horizon * b;
    let mut h_now = Vec::with_capacity(k);
    for &level in &hs {
        h_now.push(tape.slice_batch(level, first, scored)?);
    }
    let pred = decode_topdown(stack, tape, k, z, &h_now)?;
    let target = tape.slice_batch(frames, h.context * b, scored)?;
    let recon = distributions::gaussian_log_prob(tape, target, pred, stack.config.sigma_dec)?;
    let kl = distributions::kl_divergence(tape, &q, &p)?;
    let weighted = tape.scale(kl, stack.config.beta)?;
    let elbo = tape.sub(recon, weighted)?;
    Ok(ElboVars { recon, kl, elbo })
}
