//! Composite layers built from tape primitives.

use super::{Padding, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Weights of a convolutional GRU cell. Each gate convolution takes the
/// channel concatenation of input and (possibly reset) state.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub update_w: Var,
    pub update_b: Var,
    pub reset_w: Var,
    pub reset_b: Var,
    pub cand_w: Var,
    pub cand_b: Var,
}

/// One step of a convolutional GRU:
///
/// ```text
/// z  = sigmoid(conv([x, h], Wz))
/// r  = sigmoid(conv([x, h], Wr))
/// h~ = tanh(conv([x, r*h], Wc))
/// h' = h + z * (h~ - h)
/// ```
pub fn conv_gru_step<S: Scalar>(
    tape: &mut Tape<S>,
    state: Var,
    input: Var,
    w: &GruVars,
) -> Result<Var> {
    const OP: &str = "conv_gru_step";
    let (ss, is) = (tape.shape(state).to_vec(), tape.shape(input).to_vec());
    if ss.len() != 4 {
        return Err(Error::shape(OP, "state rank", 4, ss.len()));
    }
    if is.len() != 4 {
        return Err(Error::shape(OP, "input rank", 4, is.len()));
    }
    for (i, name) in [(0, "batch"), (1, "height"), (2, "width")] {
        if ss[i] != is[i] {
            return Err(Error::shape(OP, format!("input {name}"), ss[i], is[i]));
        }
    }
    let xh = tape.concat_channels(&[input, state])?;
    let z = tape.conv2d(xh, w.update_w, w.update_b, 1, Padding::Same)?;
    let z = tape.sigmoid(z)?;
    let r = tape.conv2d(xh, w.reset_w, w.reset_b, 1, Padding::Same)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, state)?;
    let xrh = tape.concat_channels(&[input, rh])?;
    let cand = tape.conv2d(xrh, w.cand_w, w.cand_b, 1, Padding::Same)?;
    let cand = tape.tanh(cand)?;
    let delta = tape.sub(cand, state)?;
    let gated = tape.mul(z, delta)?;
    tape.add(state, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn gru_vars(tape: &mut Tape<f64>, cin: usize, c: usize, fill: f64, bias: [f64; 3]) -> GruVars {
        let mut mk = |b: f64| {
            let w = tape.leaf(Tensor::full(vec![3, 3, cin + c, c], fill), true);
            let bb = tape.leaf(Tensor::full(vec![c], b), true);
            (w, bb)
        };
        let (update_w, update_b) = mk(bias[0]);
        let (reset_w, reset_b) = mk(bias[1]);
        let (cand_w, cand_b) = mk(bias[2]);
        GruVars {
            update_w,
            update_b,
            reset_w,
            reset_b,
            cand_w,
            cand_b,
        }
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut tape = Tape::<f64>::new();
        let w = gru_vars(&mut tape, 2, 3, 0.0, [0.0; 3]);
        let h = Tensor::from_fn(vec![1, 2, 2, 3], |i| i as f64 - 4.0);
        let state = tape.constant(h.clone());
        let x = tape.constant(Tensor::full(vec![1, 2, 2, 2], 0.7));
        let out = conv_gru_step(&mut tape, state, x, &w).unwrap();
        for (o, s) in tape.value(out).data().iter().zip(h.data()) {
            assert!((o - 0.5 * s).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_update_gate_preserves_state_exactly() {
        let mut tape = Tape::<f64>::new();
        let w = gru_vars(&mut tape, 1, 2, 0.3, [-1e4, 0.0, 0.0]);
        let h = Tensor::from_fn(vec![1, 3, 3, 2], |i| (i as f64 * 0.37).sin());
        let state = tape.constant(h.clone());
        let x = tape.constant(Tensor::full(vec![1, 3, 3, 1], 0.2));
        let out = conv_gru_step(&mut tape, state, x, &w).unwrap();
        assert_eq!(tape.value(out), &h);
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let w = gru_vars(&mut tape, 1, 1, 0.0, [0.0; 3]);
        let state = tape.constant(Tensor::zeros(vec![1, 2, 2, 1]));
        let x = tape.constant(Tensor::zeros(vec![1, 3, 2, 1]));
        let err = conv_gru_step(&mut tape, state, x, &w).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }
}
