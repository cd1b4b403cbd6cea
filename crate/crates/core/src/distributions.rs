//! Diagonal Gaussians on the tape: reparameterized sampling, the closed-form
//! KL divergence, and the fixed-variance Gaussian log-likelihood.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Learned standard deviations are clamped into this range.
pub const STD_MIN: f64 = 1e-3;
pub const STD_MAX: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Std {
    /// Per-element standard deviation recorded on the tape.
    Learned(Var),
    /// One positive constant for every element.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Var,
    pub std: Std,
}

impl DiagonalGaussian {
    /// `std = clamp(exp(log_std), STD_MIN, STD_MAX)`.
    pub fn from_log_std<S: Scalar>(tape: &mut Tape<S>, mean: Var, log_std: Var) -> Result<Self> {
        let std = tape.exp(log_std)?;
        Self::learned(tape, mean, std)
    }

    /// `std = clamp(softplus(raw), STD_MIN, STD_MAX)`.
    pub fn from_softplus<S: Scalar>(tape: &mut Tape<S>, mean: Var, raw: Var) -> Result<Self> {
        let std = tape.softplus(raw)?;
        Self::learned(tape, mean, std)
    }

    fn learned<S: Scalar>(tape: &mut Tape<S>, mean: Var, std: Var) -> Result<Self> {
        if tape.shape(mean) != tape.shape(std) {
            return Err(Error::invalid(
                "diagonal_gaussian",
                format!(
                    "mean shape {:?} differs from scale shape {:?}",
                    tape.shape(mean),
                    tape.shape(std)
                ),
            ));
        }
        let std = tape.clamp(std, STD_MIN, STD_MAX)?;
        Ok(DiagonalGaussian {
            mean,
            std: Std::Learned(std),
        })
    }

    pub fn fixed(mean: Var, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(
                "diagonal_gaussian",
                format!("fixed std must be positive, got {std}"),
            ));
        }
        Ok(DiagonalGaussian {
            mean,
            std: Std::Fixed(std),
        })
    }

    /// The per-element standard deviation, materialized.
    pub fn std_values<S: Scalar>(&self, tape: &Tape<S>) -> Tensor<S> {
        match self.std {
            Std::Learned(v) => tape.value(v).clone(),
            Std::Fixed(s) => Tensor::full(tape.shape(self.mean).to_vec(), S::c(s)),
        }
    }

    fn std_var<S: Scalar>(&self, tape: &mut Tape<S>) -> Var {
        match self.std {
            Std::Learned(v) => v,
            Std::Fixed(s) => {
                let t = Tensor::full(tape.shape(self.mean).to_vec(), S::c(s));
                tape.constant(t)
            }
        }
    }
}

/// `KL(q || p)` summed over all elements:
/// `ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2`.
pub fn kl_divergence<S: Scalar>(
    tape: &mut Tape<S>,
    q: &DiagonalGaussian,
    p: &DiagonalGaussian,
) -> Result<Var> {
    let (qs, ps) = (tape.shape(q.mean).to_vec(), tape.shape(p.mean).to_vec());
    if qs != ps {
        return Err(Error::invalid(
            "kl_divergence",
            format!("q shape {qs:?} differs from p shape {ps:?}"),
        ));
    }
    let sq = q.std_var(tape);
    let sp = p.std_var(tape);
    let log_sq = tape.log(sq)?;
    let log_sp = tape.log(sp)?;
    let log_ratio = tape.sub(log_sp, log_sq)?;
    let var_q = tape.square(sq)?;
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.square(dm)?;
    let num = tape.add(var_q, dm2)?;
    let var_p = tape.square(sp)?;
    let den = tape.scale(var_p, 2.0)?;
    let frac = tape.div(num, den)?;
    let elem = tape.add(log_ratio, frac)?;
    let elem = tape.add_scalar(elem, -0.5)?;
    tape.sum(elem)
}

/// `mean + std * noise`, with `noise` held constant.
pub fn sample_reparam<S: Scalar>(
    tape: &mut Tape<S>,
    d: &DiagonalGaussian,
    noise: Tensor<S>,
) -> Result<Var> {
    if noise.shape() != tape.shape(d.mean) {
        return Err(Error::invalid(
            "sample_reparam",
            format!(
                "noise shape {:?} differs from mean shape {:?}",
                noise.shape(),
                tape.shape(d.mean)
            ),
        ));
    }
    match d.std {
        Std::Learned(std) => {
            let eps = tape.constant(noise);
            let scaled = tape.mul(std, eps)?;
            tape.add(d.mean, scaled)
        }
        Std::Fixed(s) => {
            let scaled = tape.constant(noise.map(|e| e * S::c(s)));
            tape.add(d.mean, scaled)
        }
    }
}

/// `sum_i -1/2 ln(2 pi std^2) - (x_i - mean_i)^2 / (2 std^2)`.
pub fn gaussian_log_prob<S: Scalar>(tape: &mut Tape<S>, x: Var, mean: Var, std: f64) -> Result<Var> {
    if !(std > 0.0) {
        return Err(Error::invalid("gaussian_log_prob", "std must be positive"));
    }
    let n = tape.value(x).numel() as f64;
    let d = tape.sub(x, mean)?;
    let d2 = tape.square(d)?;
    let ss = tape.sum(d2)?;
    let scaled = tape.scale(ss, -0.5 / (std * std))?;
    tape.add_scalar(scaled, -0.5 * n * (2.0 * PI * std * std).ln())
}
