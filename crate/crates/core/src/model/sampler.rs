use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::tensor::Tensor;

/// One standard-normal draw made for a latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DrawRecord {
    pub level: usize,
    pub numel: usize,
}

/// The only source of latent noise. Every draw is logged.
#[derive(Clone, Debug)]
pub struct LatentSampler {
    rng: Option<ChaCha8Rng>,
    draws: Vec<DrawRecord>,
}

impl LatentSampler {
    pub fn new(seed: u64) -> Self {
        LatentSampler {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            draws: Vec::new(),
        }
    }

    /// A sampler that always returns zeros (the distribution means).
    pub fn zeros() -> Self {
        LatentSampler {
            rng: None,
            draws: Vec::new(),
        }
    }

    pub fn draw(&mut self, level: usize, shape: Vec<usize>) -> Tensor<f32> {
        let t = match &mut self.rng {
            Some(rng) => Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) as f32),
            None => Tensor::zeros(shape),
        };
        self.draws.push(DrawRecord {
            level,
            numel: t.numel(),
        });
        t
    }

    pub fn draws(&self) -> &[DrawRecord] {
        &self.draws
    }

    pub fn clear_draws(&mut self) {
        self.draws.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_logged_and_seeded() {
        let mut a = LatentSampler::new(1);
        let mut b = LatentSampler::new(1);
        assert_eq!(a.draw(2, vec![3, 4]), b.draw(2, vec![3, 4]));
        assert_eq!(a.draws(), &[DrawRecord { level: 2, numel: 12 }]);
        let mut z = LatentSampler::zeros();
        assert!(z.draw(1, vec![5]).data().iter().all(|&v| v == 0.0));
    }
}
