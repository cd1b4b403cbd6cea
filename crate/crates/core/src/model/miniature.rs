//! A one-dimensional linear latent-variable model with the same objective as
//! the full stack: Gaussian prior, linear-Gaussian decoder, and a linear
//! posterior with fixed scale.

use rand::Rng;

use crate::distributions::{gaussian_log_prob, kl_divergence, DiagonalGaussian};
use crate::error::Result;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearMiniature {
    pub prior_mean: f64,
    pub prior_log_std: f64,
    pub dec_weight: f64,
    pub dec_bias: f64,
    pub dec_std: f64,
    pub enc_weight: f64,
    pub enc_bias: f64,
    pub post_std: f64,
}

impl LinearMiniature {
    pub fn random(rng: &mut impl Rng) -> Self {
        LinearMiniature {
            prior_mean: rng.random_range(-1.0..1.0),
            prior_log_std: rng.random_range(-1.0..0.5),
            dec_weight: rng.random_range(-2.0..2.0),
            dec_bias: rng.random_range(-1.0..1.0),
            dec_std: rng.random_range(0.2..1.5),
            enc_weight: rng.random_range(-1.0..1.0),
            enc_bias: rng.random_range(-1.0..1.0),
            post_std: rng.random_range(0.05..1.0),
        }
    }

    /// `E_q[log p(x | z)] - KL(q || p)` in closed form. With a linear decoder
    /// the expected log-likelihood is the log-likelihood at the posterior mean
    /// minus `w^2 s_q^2 / (2 s_dec^2)`.
    pub fn elbo(&self, x: f64) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let scalar = |tape: &mut Tape<f64>, v: f64| tape.constant(Tensor::new(vec![1], vec![v]).unwrap());
        let xv = scalar(&mut tape, x);
        let q_mean = tape.scale(xv, self.enc_weight)?;
        let q_mean = tape.add_scalar(q_mean, self.enc_bias)?;
        let q = DiagonalGaussian::fixed(q_mean, self.post_std)?;
        let pm = scalar(&mut tape, self.prior_mean);
        let pl = scalar(&mut tape, self.prior_log_std);
        let p = DiagonalGaussian::from_log_std(&mut tape, pm, pl)?;
        let x_mean = tape.scale(q_mean, self.dec_weight)?;
        let x_mean = tape.add_scalar(x_mean, self.dec_bias)?;
        let at_mean = gaussian_log_prob(&mut tape, xv, x_mean, self.dec_std)?;
        let spread = (self.dec_weight * self.post_std).powi(2) / (2.0 * self.dec_std.powi(2));
        let recon = tape.add_scalar(at_mean, -spread)?;
        let kl = kl_divergence(&mut tape, &q, &p)?;
        let elbo = tape.sub(recon, kl)?;
        Ok(tape.value(elbo).item())
    }

    /// Mean and standard deviation of the exact posterior `p(z | x)`.
    pub fn exact_posterior(&self, x: f64) -> (f64, f64) {
        let sp2 = (2.0 * self.prior_log_std).exp();
        let sd2 = self.dec_std.powi(2);
        let precision = 1.0 / sp2 + self.dec_weight.powi(2) / sd2;
        let mean = (self.prior_mean / sp2 + self.dec_weight * (x - self.dec_bias) / sd2) / precision;
        (mean, precision.recip().sqrt())
    }

    /// The same model with its posterior replaced by the best fixed-scale fit:
    /// exact posterior mean and scale, expressed through the linear encoder.
    pub fn with_exact_posterior(&self, x: f64) -> Self {
        let (mean, std) = self.exact_posterior(x);
        LinearMiniature {
            enc_weight: 0.0,
            enc_bias: mean,
            post_std: std,
            ..*self
        }
    }

    /// `log p(x)` in closed form.
    pub fn log_evidence(&self, x: f64) -> f64 {
        let var = (self.dec_weight * self.prior_log_std.exp()).powi(2) + self.dec_std.powi(2);
        let m = self.dec_weight * self.prior_mean + self.dec_bias;
        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - m).powi(2) / (2.0 * var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_posterior_closes_the_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = LinearMiniature::random(&mut rng);
            let x = rng.random_range(-2.0..2.0);
            let tight = m.with_exact_posterior(x).elbo(x).unwrap();
            assert!((tight - m.log_evidence(x)).abs() < 1e-10);
            assert!(m.elbo(x).unwrap() <= m.log_evidence(x) + 1e-12);
        }
    }
}
