use rand::Rng;

use super::episode::Episode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of equal-length windows laid out time-major: row `t * batch + b`
/// holds frame `t` of window `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[length * batch, H, W, C]`.
    pub frames: Tensor<f32>,
    /// `[(length - 1) * batch, action_dim]`.
    pub actions: Option<Tensor<f32>>,
    pub batch: usize,
    pub length: usize,
}

impl Batch {
    /// Windows `starts[i]..starts[i] + length` of `episodes[i]`.
    pub fn from_windows(episodes: &[&Episode], starts: &[usize], length: usize) -> Result<Batch> {
        let batch = episodes.len();
        if batch == 0 || starts.len() != batch || length == 0 {
            return Err(Error::Data("a batch needs at least one full window".into()));
        }
        for (ep, &s) in episodes.iter().zip(starts) {
            if s + length > ep.len() {
                return Err(Error::Data(format!(
                    "window {s}..{} exceeds episode of {} frames",
                    s + length,
                    ep.len()
                )));
            }
        }
        let frame_numel = episodes[0].frames.numel() / episodes[0].len();
        let mut frames = Vec::with_capacity(length * batch * frame_numel);
        for t in 0..length {
            for (ep, &s) in episodes.iter().zip(starts) {
                let fs = ep.frames.shape();
                if fs[1..] != episodes[0].frames.shape()[1..] {
                    return Err(Error::Data("episodes in a batch differ in frame shape".into()));
                }
                let row = (s + t) * frame_numel;
                frames.extend_from_slice(&ep.frames.data()[row..row + frame_numel]);
            }
        }
        let mut shape = episodes[0].frames.shape().to_vec();
        shape[0] = length * batch;
        let frames = Tensor::new(shape, frames)?;

        let adim = episodes[0].action_dim();
        let actions = if adim > 0 && length > 1 {
            let mut data = Vec::with_capacity((length - 1) * batch * adim);
            for t in 0..length - 1 {
                for (ep, &s) in episodes.iter().zip(starts) {
                    let a = ep
                        .actions
                        .as_ref()
                        .filter(|a| a.shape()[1] == adim)
                        .ok_or_else(|| Error::Data("episodes in a batch differ in action_dim".into()))?;
                    let row = (s + t) * adim;
                    data.extend_from_slice(&a.data()[row..row + adim]);
                }
            }
            Some(Tensor::new(vec![(length - 1) * batch, adim], data)?)
        } else {
            None
        };
        Ok(Batch {
            frames,
            actions,
            batch,
            length,
        })
    }

    /// `batch` windows drawn uniformly over episodes and start offsets.
    pub fn sample(episodes: &[Episode], batch: usize, length: usize, rng: &mut impl Rng) -> Result<Batch> {
        let usable: Vec<&Episode> = episodes.iter().filter(|e| e.len() >= length).collect();
        if usable.is_empty() {
            return Err(Error::Data(format!("no episode holds {length} frames")));
        }
        let mut picks = Vec::with_capacity(batch);
        let mut starts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let ep = usable[rng.random_range(0..usable.len())];
            starts.push(rng.random_range(0..=ep.len() - length));
            picks.push(ep);
        }
        Batch::from_windows(&picks, &starts, length)
    }

    pub fn frame_numel(&self) -> usize {
        self.frames.numel() / self.frames.shape()[0]
    }

    /// Frames `t` of every window, `[batch, H, W, C]`.
    pub fn frames_at(&self, t: usize) -> Tensor<f32> {
        let n = self.frame_numel() * self.batch;
        let mut shape = self.frames.shape().to_vec();
        shape[0] = self.batch;
        Tensor::new(shape, self.frames.data()[t * n..(t + 1) * n].to_vec()).expect("frame rows")
    }

    /// Actions `t` of every window, `[batch, action_dim]`.
    pub fn actions_at(&self, t: usize) -> Option<Tensor<f32>> {
        self.actions.as_ref().map(|a| {
            let adim = a.shape()[1];
            let n = adim * self.batch;
            Tensor::new(vec![self.batch, adim], a.data()[t * n..(t + 1) * n].to_vec()).expect("action rows")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(offset: f32) -> Episode {
        let frames = Tensor::from_fn(vec![5, 1, 1, 1], |i| (offset + i as f32) / 100.0);
        let actions = Tensor::from_fn(vec![4, 1], |i| offset + i as f32);
        Episode::new(frames, Some(actions), 0).unwrap()
    }

    #[test]
    fn windows_are_time_major() {
        let (a, b) = (episode(0.0), episode(50.0));
        let batch = Batch::from_windows(&[&a, &b], &[1, 2], 3).unwrap();
        let px: Vec<f32> = batch.frames.data().iter().map(|v| (v * 100.0).round()).collect();
        assert_eq!(px, vec![1.0, 52.0, 2.0, 53.0, 3.0, 54.0]);
        assert_eq!(batch.actions.as_ref().unwrap().data(), &[1.0, 52.0, 2.0, 53.0]);
        assert_eq!(batch.frames_at(1).data().len(), 2);
        assert_eq!(batch.actions_at(1).unwrap().data(), &[2.0, 53.0]);
    }

    #[test]
    fn windows_must_fit() {
        let a = episode(0.0);
        assert!(Batch::from_windows(&[&a], &[3], 3).is_err());
    }
}
