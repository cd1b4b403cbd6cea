//! Building blocks of every forward pass over a stack.

use super::stack::GhvaeStack;
use crate::distributions::DiagonalGaussian;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Whether ground-truth future frames may be consulted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Train,
    Test,
}

/// Hidden features `[h^1, ..., h^up_to]` of `frames` (`[B, H, W, C]`).
///
/// An encoder whose parameters are all frozen and whose input carries no
/// gradient runs on a scratch tape; only its output is recorded here, as a
/// constant.
pub fn encode_pyramid(stack: &GhvaeStack, tape: &mut Tape<f32>, frames: Var, up_to: usize) -> Result<Vec<Var>> {
    if up_to > stack.depth() {
        return Err(Error::invalid(
            "encode_pyramid",
            format!("requested level {up_to} of a {}-level stack", stack.depth()),
        ));
    }
    let img = stack.image;
    let s = tape.shape(frames);
    let expected = [img.height, img.width, img.channels];
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::invalid(
            "encode_pyramid",
            format!("frames of shape {s:?} do not match image {expected:?}"),
        ));
    }
    let mut out = Vec::with_capacity(up_to);
    let mut x = frames;
    for m in &stack.modules[..up_to] {
        let b = m.binding();
        x = if m.encoder.frozen(b) && !tape.requires_grad(x) {
            let mut scratch = Tape::new();
            let input = scratch.constant(tape.value(x).clone());
            let y = m.encoder.forward(&mut scratch, b, input)?;
            tape.constant(scratch.value(y).clone())
        } else {
            m.encoder.forward(tape, b, x)?
        };
        out.push(x);
    }
    Ok(out)
}

/// All-zero recurrent state for level `k`; it has the latent's shape.
pub fn initial_state(stack: &GhvaeStack, k: usize, batch: usize) -> Tensor<f32> {
    Tensor::zeros(stack.module(k).spec.latent_shape(batch))
}

/// Advance the prior's recurrent state with `h_t` and the action `a_t`.
pub fn prior_cell(
    stack: &GhvaeStack,
    tape: &mut Tape<f32>,
    k: usize,
    state: Var,
    h: Var,
    action: Option<Var>,
) -> Result<Var> {
    const OP: &str = "prior_step";
    let m = stack.module(k);
    let adim = stack.config.action_dim;
    let input = match (adim, action) {
        (0, None) => h,
        (0, Some(_)) => return Err(Error::invalid(OP, "action given to an action-free stack")),
        (_, None) => return Err(Error::invalid(OP, format!("stack expects {adim}-dim actions"))),
        (_, Some(a)) => {
            let s = tape.shape(a).to_vec();
            if s.len() != 2 || s[1] != adim {
                return Err(Error::shape(OP, "action_dim", adim, s.last().copied().unwrap_or(0)));
            }
            let tiled = tape.tile_spatial(a, m.spec.height, m.spec.width)?;
            tape.concat_channels(&[h, tiled])?
        }
    };
    m.prior.cell.step(tape, m.binding(), state, input)
}

/// The prior distribution read out of an advanced state.
pub fn prior_heads(stack: &GhvaeStack, tape: &mut Tape<f32>, k: usize, state: Var) -> Result<DiagonalGaussian> {
    let m = stack.module(k);
    let b = m.binding();
    let mean = m.prior.mean_head.forward(tape, b, state)?;
    let raw = m.prior.scale_head.forward(tape, b, state)?;
    DiagonalGaussian::from_softplus(tape, mean, raw)
}

/// One prior step: `(p(z^k_{t+1} | h^k_t, a_t), new state)`.
pub fn prior_step(
    stack: &GhvaeStack,
    tape: &mut Tape<f32>,
    k: usize,
    state: Var,
    h: Var,
    action: Option<Var>,
) -> Result<(DiagonalGaussian, Var)> {
    let next = prior_cell(stack, tape, k, state, h, action)?;
    Ok((prior_heads(stack, tape, k, next)?, next))
}

pub fn posterior_cell(
    stack: &GhvaeStack,
    tape: &mut Tape<f32>,
    k: usize,
    state: Var,
    h_next: Var,
    mode: ExecMode,
) -> Result<Var> {
    if mode == ExecMode::Test {
        return Err(Error::PosteriorAtTestTime);
    }
    let m = stack.module(k);
    m.posterior.cell.step(tape, m.binding(), state, h_next)
}

pub fn posterior_heads(stack: &GhvaeStack, tape: &mut Tape<f32>, k: usize, state: Var) -> Result<DiagonalGaussian> {
    let m = stack.module(k);
    let mean = m.posterior.mean_head.forward(tape, m.binding(), state)?;
    DiagonalGaussian::fixed(mean, stack.config.sigma_post)
}

/// One posterior step from the features of the true next frame:
/// `(q(z^k_{t+1} | x_{t+1}), new state)` with the fixed posterior scale.
pub fn posterior_infer(
    stack: &GhvaeStack,
    tape: &mut Tape<f32>,
    k: usize,
    state: Var,
    h_next: Var,
    mode: ExecMode,
) -> Result<(DiagonalGaussian, Var)> {
    let next = posterior_cell(stack, tape, k, state, h_next, mode)?;
    Ok((posterior_heads(stack, tape, k, next)?, next))
}

/// Decode from level `k_top` down to pixels:
/// `u^{j-1} = dec_j([h^j_t, u^j])` for `j = k_top, ..., 1`.
pub fn decode_topdown(stack: &GhvaeStack, tape: &mut Tape<f32>, k_top: usize, top: Var, hs: &[Var]) -> Result<Var> {
    if hs.len() < k_top {
        return Err(Error::invalid(
            "decode_topdown",
            format!("missing features: have {} levels, decoding from {k_top}", hs.len()),
        ));
    }
    let mut u = top;
    for j in (1..=k_top).rev() {
        let m = stack.module(j);
        u = m.decoder.forward(tape, m.binding(), hs[j - 1], u)?;
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Std;
    use crate::model::ladder::ImageSpec;
    use crate::model::stack::ModelConfig;

    fn stack(action_dim: usize) -> GhvaeStack {
        let image = ImageSpec {
            height: 32,
            width: 32,
            channels: 3,
        };
        let config = ModelConfig {
            action_dim,
            ..ModelConfig::default()
        };
        let mut s = GhvaeStack::new(image, (32, 8), config, 3).unwrap();
        s.add_level(64, 16).unwrap();
        s
    }

    fn frames(tape: &mut Tape<f32>, b: usize) -> Var {
        tape.constant(Tensor::from_fn(vec![b, 32, 32, 3], |i| ((i * 7919) % 101) as f32 / 100.0))
    }

    #[test]
    fn pyramid_shapes() {
        let s = stack(0);
        let mut tape = Tape::new();
        let x = frames(&mut tape, 2);
        let hs = encode_pyramid(&s, &mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(hs[0]), &[2, 16, 16, 32]);
        assert_eq!(tape.shape(hs[1]), &[2, 8, 8, 64]);
        assert!(encode_pyramid(&s, &mut tape, x, 0).unwrap().is_empty());
    }

    #[test]
    fn frozen_encoder_runs_off_tape() {
        let s = stack(0);
        let mut tape = Tape::new();
        let x = frames(&mut tape, 1);
        let hs = encode_pyramid(&s, &mut tape, x, 2).unwrap();
        assert!(!tape.requires_grad(hs[0]));
        assert!(tape.requires_grad(hs[1]));
    }

    #[test]
    fn fresh_prior_has_zero_mean() {
        let s = stack(2);
        let mut tape = Tape::new();
        let state = tape.constant(initial_state(&s, 2, 1));
        let h = tape.constant(Tensor::zeros(vec![1, 8, 8, 64]));
        let a = tape.constant(Tensor::zeros(vec![1, 2]));
        let (p, _) = prior_step(&s, &mut tape, 2, state, h, Some(a)).unwrap();
        assert!(tape.value(p.mean).data().iter().all(|&v| v == 0.0));
        assert!(matches!(p.std, Std::Learned(_)));
        let err = prior_step(&s, &mut tape, 2, state, h, None).unwrap_err();
        assert!(err.to_string().contains("2-dim actions"));
        let bad = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(prior_step(&s, &mut tape, 2, state, h, Some(bad)).is_err());
    }

    #[test]
    fn posterior_is_refused_at_test_time() {
        let s = stack(0);
        let mut tape = Tape::new();
        let state = tape.constant(initial_state(&s, 2, 1));
        let h = tape.constant(Tensor::zeros(vec![1, 8, 8, 64]));
        assert!(matches!(
            posterior_infer(&s, &mut tape, 2, state, h, ExecMode::Test),
            Err(Error::PosteriorAtTestTime)
        ));
        let (q, _) = posterior_infer(&s, &mut tape, 2, state, h, ExecMode::Train).unwrap();
        assert_eq!(q.std, Std::Fixed(0.1));
        assert!(q.std_values(&tape).data().iter().all(|&v| v == 0.1f32));
    }

    #[test]
    fn decoding_returns_frame_shape() {
        let s = stack(0);
        let mut tape = Tape::new();
        let x = frames(&mut tape, 2);
        let hs = encode_pyramid(&s, &mut tape, x, 2).unwrap();
        let z = tape.constant(Tensor::zeros(vec![2, 8, 8, 16]));
        let y = decode_topdown(&s, &mut tape, 2, z, &hs).unwrap();
        assert_eq!(tape.shape(y), &[2, 32, 32, 3]);
        let z1 = tape.constant(Tensor::zeros(vec![2, 16, 16, 8]));
        let y1 = decode_topdown(&s, &mut tape, 1, z1, &hs[..1]).unwrap();
        assert_eq!(tape.shape(y1), &[2, 32, 32, 3]);
        assert!(decode_topdown(&s, &mut tape, 2, z, &hs[..1]).is_err());
    }
}
